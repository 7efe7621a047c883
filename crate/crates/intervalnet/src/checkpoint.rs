//! Binary checkpoints: a named-array container for resumable experiments,
//! plus the standalone universal-weight export.
//!
//! Container layout (all little-endian):
//!   magic "INCK" | version u32 | count u32 |
//!   per entry: name_len u16 | name utf8 | ndim u8 | dims u32* | data f64*
//!
//! Universal-weight export ("INUW") stores the target architecture
//! descriptor followed by the flat weight vector, so a separate loader can
//! evaluate it with no hypernetwork present:
//!   magic "INUW" | version u32 | n_layer_sizes u32 | sizes u32* |
//!   head_tag u8 (0 shared, 1 multi) | [n_tasks u32 | counts u32*] |
//!   d u64 | theta f64*

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, ArrayViewD, IxDyn};

use crate::embedding::{Nesting, TaskEmbeddingState};
use crate::error::{Error, Result};
use crate::hypernet::{Hypernet, RegTargetSet};
use crate::target_net::{HeadLayout, TargetArch};
use crate::trainer::Trainer;

const CONTAINER_MAGIC: &[u8; 4] = b"INCK";
const UNIVERSAL_MAGIC: &[u8; 4] = b"INUW";
const VERSION: u32 = 1;

/// Writes named f64 arrays in declaration order.
pub fn save_named(path: &Path, entries: &[(&str, ArrayViewD<'_, f64>)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, arr) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[arr.ndim() as u8])?;
        for &d in arr.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let std_arr = arr.as_standard_layout();
        for &v in std_arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a named-array container back, preserving entry order.
pub fn load_named(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated container {}: need {} bytes at offset {}",
                path.display(),
                n,
                at
            )));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let magic = take(&mut at, 4)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::Checkpoint(format!("bad container magic in {}", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = take(&mut at, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut at, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap()));
    }
    Ok(out)
}

fn nesting_code(n: Nesting) -> f64 {
    match n {
        Nesting::Cos => 0.0,
        Nesting::Tanh => 1.0,
        Nesting::None => 2.0,
    }
}

fn nesting_from_code(c: f64) -> Result<Nesting> {
    match c as i64 {
        0 => Ok(Nesting::Cos),
        1 => Ok(Nesting::Tanh),
        2 => Ok(Nesting::None),
        _ => Err(Error::Checkpoint(format!("bad nesting code {c}"))),
    }
}

/// Saves the full training state: hypernetwork weights, frozen task
/// embeddings, and the active regularization snapshot.
pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<()> {
    let hnet = trainer.hypernet();
    let sizes: ArrayD<f64> = ArrayD::from_shape_vec(
        IxDyn(&[hnet.layer_sizes.len()]),
        hnet.layer_sizes.iter().map(|&s| s as f64).collect(),
    )
    .unwrap();
    let mut owned: Vec<(String, ArrayD<f64>)> = vec![("meta.hnet_sizes".into(), sizes)];
    for (l, (w, b)) in hnet.weights.iter().zip(hnet.biases.iter()).enumerate() {
        owned.push((format!("hnet.w{l}"), w.clone().into_dyn()));
        owned.push((format!("hnet.b{l}"), b.clone().into_dyn()));
    }
    for (t, st) in trainer.states.iter().enumerate() {
        owned.push((format!("task{t}.pre"), st.pre.clone().into_dyn()));
        owned.push((format!("task{t}.logits"), st.logits.clone().into_dyn()));
        let meta = vec![
            st.gamma,
            nesting_code(st.nesting),
            if st.trainable_radius { 1.0 } else { 0.0 },
            if st.frozen { 1.0 } else { 0.0 },
        ];
        owned.push((
            format!("task{t}.meta"),
            ArrayD::from_shape_vec(IxDyn(&[4]), meta).unwrap(),
        ));
    }
    if let Some(reg) = &trainer.reg {
        owned.push(("reg.probes".into(), reg.probes.clone().into_dyn()));
        owned.push(("reg.targets".into(), reg.targets.clone().into_dyn()));
        let meta = vec![reg.num_tasks as f64, reg.probes_per_task as f64];
        owned.push((
            "reg.meta".into(),
            ArrayD::from_shape_vec(IxDyn(&[2]), meta).unwrap(),
        ));
    }
    let entries: Vec<(&str, ArrayViewD<'_, f64>)> =
        owned.iter().map(|(n, a)| (n.as_str(), a.view())).collect();
    save_named(path, &entries)
}

/// Restored training state.
pub struct LoadedRun {
    pub hnet: Hypernet,
    pub states: Vec<TaskEmbeddingState>,
    pub reg: Option<RegTargetSet>,
}

/// Loads a trainer checkpoint written by [`save_trainer`].
pub fn load_trainer(path: &Path) -> Result<LoadedRun> {
    let entries = load_named(path)?;
    let get = |name: &str| -> Result<&ArrayD<f64>> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    };
    let sizes: Vec<usize> = get("meta.hnet_sizes")?.iter().map(|&v| v as usize).collect();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..sizes.len() - 1 {
        weights.push(
            get(&format!("hnet.w{l}"))?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| Error::Checkpoint("weight rank".into()))?,
        );
        biases.push(
            get(&format!("hnet.b{l}"))?
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Checkpoint("bias rank".into()))?,
        );
    }
    let hnet = Hypernet { layer_sizes: sizes, weights, biases };

    let mut states = Vec::new();
    for t in 0.. {
        let pre = match entries.iter().find(|(n, _)| n == &format!("task{t}.pre")) {
            Some((_, a)) => a.clone(),
            None => break,
        };
        let logits = get(&format!("task{t}.logits"))?.clone();
        let meta = get(&format!("task{t}.meta"))?;
        states.push(TaskEmbeddingState {
            pre: pre.into_dimensionality().map_err(|_| Error::Checkpoint("pre rank".into()))?,
            logits: logits
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint("logits rank".into()))?,
            gamma: meta[[0]],
            nesting: nesting_from_code(meta[[1]])?,
            trainable_radius: meta[[2]] != 0.0,
            frozen: meta[[3]] != 0.0,
        });
    }

    let reg = if entries.iter().any(|(n, _)| n == "reg.probes") {
        let meta = get("reg.meta")?;
        Some(RegTargetSet {
            probes: get("reg.probes")?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint("probes rank".into()))?,
            targets: get("reg.targets")?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::Checkpoint("targets rank".into()))?,
            num_tasks: meta[[0]] as usize,
            probes_per_task: meta[[1]] as usize,
        })
    } else {
        None
    };

    Ok(LoadedRun { hnet, states, reg })
}

/// Writes the standalone universal weight vector with its architecture
/// descriptor.
pub fn save_universal(path: &Path, arch: &TargetArch, theta: &Array1<f64>) -> Result<()> {
    if theta.len() != arch.flat_len() {
        return Err(Error::ShapeMismatch {
            context: "save_universal theta length",
            expected: vec![arch.flat_len()],
            got: vec![theta.len()],
        });
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(UNIVERSAL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arch.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &arch.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    match &arch.head {
        HeadLayout::Shared => w.write_all(&[0u8])?,
        HeadLayout::MultiHead { classes_per_task } => {
            w.write_all(&[1u8])?;
            w.write_all(&(classes_per_task.len() as u32).to_le_bytes())?;
            for &c in classes_per_task {
                w.write_all(&(c as u32).to_le_bytes())?;
            }
        }
    }
    w.write_all(&(theta.len() as u64).to_le_bytes())?;
    for &v in theta.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a standalone universal-weight checkpoint.
pub fn load_universal(path: &Path) -> Result<(TargetArch, Array1<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated universal checkpoint {}",
                path.display()
            )));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != UNIVERSAL_MAGIC {
        return Err(Error::Checkpoint(format!("bad universal magic in {}", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_sizes = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
    }
    let head = match take(&mut at, 1)?[0] {
        0 => HeadLayout::Shared,
        1 => {
            let n = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let mut counts = Vec::with_capacity(n);
            for _ in 0..n {
                counts.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
            }
            HeadLayout::MultiHead { classes_per_task: counts }
        }
        t => return Err(Error::Checkpoint(format!("bad head tag {t}"))),
    };
    let d = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let raw = take(&mut at, d * 8)?;
    let theta: Array1<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arch = TargetArch::new(sizes, head);
    if theta.len() != arch.flat_len() {
        return Err(Error::Checkpoint(format!(
            "weight count {} does not match architecture ({})",
            theta.len(),
            arch.flat_len()
        )));
    }
    Ok((arch, theta))
}
