use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subtune_core::train::{evaluate, train, Dataset, Loss, TrainConfig};
use subtune_core::{Activation, Layer, Matrix, Method, Model, TunerConfig};

fn planted(seed: u64, n: usize, m: usize, rank: usize) -> (Model, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::random_normal(n, m, 1.0 / (n as f64).sqrt(), &mut rng);
    let std = 1.0 / (rank as f64).sqrt();
    let x = Matrix::random_normal(n, rank, std, &mut rng);
    let y = Matrix::random_normal(m, rank, std, &mut rng);
    let w_star = w.add(&x.matmul_t(&y).unwrap()).unwrap();
    let probes = Matrix::random_normal(64, n, 1.0, &mut rng);
    let data = Dataset::new(probes.clone(), probes.matmul(&w_star).unwrap()).unwrap();
    let layer = Layer::new(w, vec![0.0; m], Activation::Identity).unwrap();
    (Model::new(vec![layer], seed).unwrap(), data)
}

#[test]
fn flora_recovers_planted_delta() {
    for seed in 0..20 {
        let (mut model, data) = planted(seed, 16, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        model
            .attach_all(Method::FLoRA, &TunerConfig { rank: 3, ..TunerConfig::default() }, &mut rng)
            .unwrap();
        let initial = evaluate(&model, &data, Loss::Mse).unwrap();
        let trace = train(&mut model, &data, &TrainConfig { steps: 1500, seed, ..TrainConfig::default() }).unwrap();
        let last = evaluate(&model, &data, Loss::Mse).unwrap();
        assert!(last < 0.01 * initial, "seed {seed}: {initial} -> {last}");
        let quarter = trace.loss_per_step.len() / 4;
        let head: f64 = trace.loss_per_step[..quarter].iter().sum();
        let tail: f64 = trace.loss_per_step[3 * quarter..].iter().sum();
        assert!(tail < head);
    }
}
