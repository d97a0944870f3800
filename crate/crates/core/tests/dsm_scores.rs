use dimscope::domain::SeedPolicy;
use dimscope::scoremodel::{train_dsm_score_net, AnalyticGaussianScore, DsmConfig, ScoreOracle};
use dimscope::synth::{analytic_covariance, sample_manifold, ManifoldKind, ManifoldSpec};
use rand::Rng;
use rand_distr::StandardNormal;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn learned_scores_align_with_analytic_line_scores() {
    let spec = ManifoldSpec::new(ManifoldKind::SubspaceGaussian, 2, 1, 4096).with_seed(21);
    let all = sample_manifold(&spec).unwrap().points;
    let train = all.select(&(0..3840).collect::<Vec<_>>()).unwrap();
    let test = all.select(&(3840..4096).collect::<Vec<_>>()).unwrap();
    let (mean, cov) = analytic_covariance(&spec).unwrap();
    let truth = AnalyticGaussianScore::new(mean, cov).unwrap();

    let cfg = DsmConfig {
        seed: 4,
        ..DsmConfig::default()
    };
    assert_eq!(cfg.steps, 20_000);
    let (net, trace) = train_dsm_score_net(&train, &cfg).unwrap();
    assert_eq!(trace.0.len(), 20_000);

    let sigma = 0.1;
    let mut rng = SeedPolicy::new(8).rng(0);
    let mut total = 0.0;
    for row in test.rows() {
        let x: Vec<f64> = row
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        total += cosine(&net.evaluate(&x, sigma).unwrap(), &truth.evaluate(&x, sigma).unwrap());
    }
    let mean_cos = total / test.n() as f64;
    assert!(mean_cos >= 0.9, "mean cosine {mean_cos}");
}
