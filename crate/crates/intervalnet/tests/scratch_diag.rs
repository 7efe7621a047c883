use intervalnet::data::synthetic::synthetic_shared_solution_tasks;
use intervalnet::embedding;
use intervalnet::eval::{self, EvalContext};
use intervalnet::hypernet::Mode;
use intervalnet::target_net::{forward_interval_batch_flat, HeadLayout, TargetArch};
use intervalnet::trainer::{BatchProvider, TrainConfig, Trainer};
use ndarray::Array1;

#[test]
fn diag_universal() {
    let seed = 17;
    let bench = synthetic_shared_solution_tasks(3, 4, 8.0, 300, seed);
    let arch = TargetArch::new(vec![4, 16, 16, 2], HeadLayout::Shared);
    let mut cfg = TrainConfig::defaults(Mode::Dil, 8, 1.0, seed);
    cfg.batch_size = 32;
    cfg.iterations = 600;
    cfg.lr = 3e-3;
    let mut trainer = Trainer::new(cfg, arch.clone(), &[16]);
    for task in &bench.tasks {
        trainer.train_task(&task.train, |_| {}).unwrap();
    }
    let ivs = trainer.materialized_states();
    for (t, iv) in ivs.iter().enumerate() {
        println!("task{t} lower {:?}", iv.lower().as_slice().unwrap());
        println!("task{t} upper {:?}", iv.upper().as_slice().unwrap());
    }
    let u = embedding::universal_embedding(&ivs).unwrap();
    println!("universal lower {:?}", u.lower().as_slice().unwrap());
    println!("universal upper {:?}", u.upper().as_slice().unwrap());
    let center = u.mid_rad().mid;
    println!("center {:?}", center.as_slice().unwrap());
    for (t, iv) in ivs.iter().enumerate() {
        println!("center in box{t}: {}", iv.contains_point(center.view(), 0.0));
    }
    let hnet = trainer.hypernet();
    let cflat: Array1<f64> = center.iter().cloned().collect();
    let theta = hnet.forward_point(cflat.view()).unwrap();
    let providers: Vec<&dyn BatchProvider> =
        bench.tasks.iter().map(|t| &t.test as &dyn BatchProvider).collect();
    let accs = eval::eval_point_theta(&arch, theta.view(), &providers).unwrap();
    println!("universal accs {accs:?}");

    // worst-case check: interval forward over task 2's box on test data
    let ctx = EvalContext { arch: &arch, hnet: &hnet, states: &trainer.states };
    let (tl, tu) = ctx.task_theta_bounds(2).unwrap();
    let idx: Vec<usize> = (0..10).collect();
    let (x, y) = bench.tasks[2].test.fetch(&idx);
    let (zl, zu) = forward_interval_batch_flat(&arch, x.view(), tl.view(), tu.view()).unwrap();
    for r in 0..3 {
        println!("y={} zl={:?} zu={:?}", y[r], zl.row(r), zu.row(r));
    }
    // theta bounds width stats
    let wmax = tl.iter().zip(tu.iter()).map(|(a, b)| b - a).fold(0.0f64, f64::max);
    println!("theta box max width {wmax}");
    // accuracy of the point at task-2 center
    let c2 = embedding::materialize(&trainer.states[2], trainer.states[2].gamma)
        .mid_rad()
        .mid;
    let c2f: Array1<f64> = c2.iter().cloned().collect();
    let th2 = hnet.forward_point(c2f.view()).unwrap();
    let acc2 = eval::eval_point_theta(&arch, th2.view(), &providers).unwrap();
    println!("task2-center accs {acc2:?}");
}
