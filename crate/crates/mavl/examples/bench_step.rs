// scratch benchmark: one training epoch timing on a small slice
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::corpus::split::synthesize_corpus;
use mavl::trainer::{train, TrainConfig};

fn main() {
    let mut cfg = default_generator_config();
    cfg.train = 256;
    cfg.valid = 64;
    cfg.test_seen = 8;
    cfg.test_unseen = 8;
    let kb = derive_kb(&cfg);
    let dir = std::env::temp_dir().join("mavl_bench_corpus");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = std::time::Instant::now();
    synthesize_corpus(&dir, &kb, &cfg).unwrap();
    println!("synth 336 samples: {:.2?}", t0.elapsed());

    let tcfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let out = std::env::temp_dir().join("mavl_bench_run");
    let _ = std::fs::remove_dir_all(&out);
    let t0 = std::time::Instant::now();
    let outcome = train(&tcfg, &dir, &kb, &out).unwrap();
    let dt = t0.elapsed();
    println!(
        "1 epoch over 256 samples + valid eval: {:.2?}  ({:.1} ms/sample)  best={:.3}",
        dt,
        dt.as_secs_f64() * 1000.0 / 256.0,
        outcome.best_metric
    );
}
