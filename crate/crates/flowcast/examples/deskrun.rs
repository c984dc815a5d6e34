// temporary tuning run for the desk-scale experiment
use flowcast::data::{make_windows, split_chronological, synth_generate, SynthSpec};
use flowcast::train::{
    cluster_snapshot, evaluate, evaluate_historical_average, purity, train, RunConfig,
};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let t0 = std::time::Instant::now();
    let spec = SynthSpec {
        noise_level: env_f64("NOISE", 0.6),
        ..SynthSpec::default()
    };
    let (dataset, labels) = synth_generate(&spec, 7).unwrap();
    let config = RunConfig {
        embedding_dim: env_usize("DIM", 16),
        clusters: env_usize("K", 4),
        learning_rate: env_f64("LR", 1e-3),
        max_epochs: env_usize("EPOCHS", 30),
        patience: 30,
        seed: 7,
        ..RunConfig::default()
    };
    let out = train(&config, &dataset).unwrap();
    let first = &out.history[0];
    let last = out.history.last().unwrap();
    println!(
        "joint first {:.2} last {:.2} ratio {:.3}",
        first.l_joint,
        last.l_joint,
        last.l_joint / first.l_joint
    );
    let spd = out.checkpoint.config.steps_per_day.unwrap();
    let samples = make_windows(&dataset, config.recent_steps, config.daily_steps, spd);
    let split = split_chronological(samples.len());
    let test = &samples[split.test.clone()];
    let model_metrics = evaluate(&out.checkpoint, &dataset, test).unwrap();
    let train_end = samples[split.train.end - 1].target_step_index;
    let ha = evaluate_historical_average(&dataset, spd, train_end, test).unwrap();
    println!(
        "model ({:.4},{:.4})  ha ({:.4},{:.4})  beats: {}",
        model_metrics.mae_in,
        model_metrics.mae_out,
        ha.mae_in,
        ha.mae_out,
        model_metrics.mae_in < ha.mae_in && model_metrics.mae_out < ha.mae_out
    );
    let snapshot = cluster_snapshot(&out.checkpoint, &dataset, &samples[split.val.clone()]).unwrap();
    println!(
        "purity {:.3}  time {:?}",
        purity(&snapshot.assignment.argmax_rows(), &labels),
        t0.elapsed()
    );
}
