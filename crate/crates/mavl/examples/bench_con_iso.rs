// scratch: contrastive-only pathway in isolation
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::corpus::split::{synthesize_corpus, SplitKind};
use mavl::eval::{evaluate_split, EvalConfig, HeadChoice};
use mavl::losses::LossWeights;
use mavl::trainer::{load_model, train, HeadMode, TrainConfig};

fn main() {
    let tau: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.3);
    let epochs: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(20);
    let mut cfg = default_generator_config();
    let ntrain: usize = std::env::args().nth(5).and_then(|a| a.parse().ok()).unwrap_or(800);
    cfg.train = ntrain; cfg.valid = 200; cfg.test_seen = 200; cfg.test_unseen = 200;
    let kb = derive_kb(&cfg);
    let dir = std::env::temp_dir().join(format!("mavl_coniso_corpus_{ntrain}"));
    if !dir.join("kb.toml").exists() { synthesize_corpus(&dir, &kb, &cfg).unwrap(); }

    let lr: f64 = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(2e-3);
    let wide: bool = std::env::args().nth(4).map(|a| a == "wide").unwrap_or(false);
    let mut tcfg = TrainConfig {
        epochs,
        head_mode: HeadMode::ContrastiveOnly,
        weights: LossWeights { tau, ..LossWeights::default() },
        learning_rate: lr,
        patience: 100,
        ..TrainConfig::default()
    };
    if wide {
        tcfg.model.conv_channels = vec![16, 32, 48, 64];
    }
    let out = std::env::temp_dir().join("mavl_coniso_run");
    let _ = std::fs::remove_dir_all(&out);
    let t = std::time::Instant::now();
    let outcome = train(&tcfg, &dir, &kb, &out).unwrap();
    println!("tau={tau} train {:.0?} best(valid con AUC)={:.4} at {}", t.elapsed(), outcome.best_metric, outcome.best_epoch);
    let (model, _) = load_model(&outcome.best_checkpoint).unwrap();
    let ecfg = EvalConfig { head: HeadChoice::Contrastive, ..EvalConfig::default() };
    for split in [SplitKind::TestSeen, SplitKind::TestUnseen] {
        let r = &evaluate_split(&model, &kb, &dir, split, &ecfg).unwrap()[0];
        println!("  {split}: con AUC {:.4}", r.macro_auc);
    }
}
