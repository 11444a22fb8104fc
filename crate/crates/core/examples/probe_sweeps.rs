use radfas::theory::*;

fn probe(tag: &str, data: &SweepDataConfig, n: usize, seeds: &[u64]) {
    let priors = PriorSpec::default();
    let ds = [4usize, 8, 16, 32, 64];
    let ks = [1usize, 2, 4, 8, 16];
    let avg = |f: &dyn Fn(u64) -> f64| -> f64 {
        seeds.iter().map(|&s| f(s)).sum::<f64>() / seeds.len() as f64
    };
    let mut kls = Vec::new();
    for &d in &ds {
        kls.push(avg(&|s| laplace_kl_symmetric(d, 4, n, &priors, data, s).unwrap().kl));
    }
    let xs: Vec<f64> = ds.iter().map(|&d| d as f64).collect();
    let (slope, _, r2) = linear_fit(&xs, &kls);
    println!("[{tag}] sym-d: kls={kls:.3?} slope={slope:.3} R2={r2:.5}");
    let mut kks = Vec::new();
    for &k in &ks {
        kks.push(avg(&|s| laplace_kl_symmetric(32, k, n, &priors, data, s).unwrap().kl));
    }
    println!("[{tag}] sym-K: {kks:.3?} monotone={}", kks.windows(2).all(|w| w[1] > w[0]));
    let mut kas = Vec::new();
    for &d in &ds {
        kas.push(avg(&|s| laplace_kl_asymmetric(d, 4, n, &priors, data, s).unwrap().kl));
    }
    println!("[{tag}] asym-d: {kas:.3?} relvar={:.4}", relative_variation(&kas));
    let mut kas = Vec::new();
    for &k in &ks {
        kas.push(avg(&|s| laplace_kl_asymmetric(32, k, n, &priors, data, s).unwrap().kl));
    }
    println!("[{tag}] asym-K: {kas:.3?} relvar={:.4}", relative_variation(&kas));
}

fn main() {
    let seeds = [11u64, 22, 33];
    probe("s0=.045 e=.0005 n=4000", &SweepDataConfig { live_sigma: 0.045, epsilon: 0.0005, attack_norm: 2.0 }, 4000, &seeds);
    probe("s0=.05 e=.001 n=4000", &SweepDataConfig { live_sigma: 0.05, epsilon: 0.001, attack_norm: 2.0 }, 4000, &seeds);
    probe("s0=.06 e=.001 n=6000", &SweepDataConfig { live_sigma: 0.06, epsilon: 0.001, attack_norm: 2.2 }, 6000, &seeds);
}
