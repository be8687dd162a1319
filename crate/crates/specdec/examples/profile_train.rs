use specdec::rng::seeded;
use specdec::target::{trace_forward, cross_entropy_loss, Lease, TargetConfig, TargetModel};
use specdec::tensor::graph::Graph;
use std::time::Instant;

fn main() {
    let cfg = TargetConfig::default();
    let mut model = TargetModel::new(cfg, &mut seeded(1)).unwrap();
    for (_, p) in model.named_params_mut() {
        p.set_requires_grad(true);
    }
    let tokens: Vec<u8> = (0..129).map(|i| (i * 37 % 251) as u8).collect();

    // forward only
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let mut lease = Lease::new();
        let _ = trace_forward(&model, &mut g, &tokens[..128], &mut lease).unwrap();
    }
    println!("trace_forward      : {:>7.1} ms", t0.elapsed().as_secs_f64() * 100.0);

    // forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let mut lease = Lease::new();
        let (logits, _) = trace_forward(&model, &mut g, &tokens[..128], &mut lease).unwrap();
        let loss = cross_entropy_loss(&mut g, logits, &tokens[1..129]).unwrap();
        g.backward(loss).unwrap();
        let mut params = model.named_params_mut();
        lease.harvest(&g, &mut params, 1.0);
        for (_, p) in params { p.clear_grad(); }
    }
    println!("fwd+bwd+harvest    : {:>7.1} ms", t0.elapsed().as_secs_f64() * 100.0);

    // session feed (inference)
    model.freeze();
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = specdec::target::target_forward(&model, &tokens[..128]).unwrap();
    }
    println!("session feed 128   : {:>7.1} ms", t0.elapsed().as_secs_f64() * 100.0);
}
