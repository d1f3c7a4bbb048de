// scratch: does the dual model learn the synthetic task?
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::corpus::split::{synthesize_corpus, SplitKind};
use mavl::eval::{evaluate_split, EvalConfig, HeadChoice};
use mavl::trainer::{train, load_model, TrainConfig};

fn main() {
    let mut cfg = default_generator_config();
    cfg.train = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(800);
    cfg.valid = 200;
    cfg.test_seen = 200;
    cfg.test_unseen = 200;
    let kb = derive_kb(&cfg);
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let _ = std::fs::remove_dir_all(&dir);
    synthesize_corpus(&dir, &kb, &cfg).unwrap();

    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let lr: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    let tcfg = TrainConfig { epochs, learning_rate: lr, ..TrainConfig::default() };
    let out = std::env::temp_dir().join("mavl_learn_run");
    let _ = std::fs::remove_dir_all(&out);
    let t0 = std::time::Instant::now();
    let outcome = train(&tcfg, &dir, &kb, &out).unwrap();
    println!("train {:?} best={:.4} at epoch {} ({} epochs run)",
        t0.elapsed(), outcome.best_metric, outcome.best_epoch, outcome.epochs_run);

    let (model, _) = load_model(&outcome.best_checkpoint).unwrap();
    let seen: Vec<String> = kb.seen_diseases().iter().map(|d| d.name.clone()).collect();
    let gthr = mavl::eval::select_grounding_threshold(&model, &kb, &dir, &seen).unwrap();
    println!("selected grounding threshold: {gthr}");
    let ecfg = EvalConfig { head: HeadChoice::Both, grounding_threshold: gthr, ..EvalConfig::default() };
    for split in [SplitKind::TestSeen, SplitKind::TestUnseen] {
        for r in evaluate_split(&model, &kb, &dir, split, &ecfg).unwrap() {
            println!("{split} {:?}: macro AUC {:.4} F1 {:.4} IoU {:?} Dice {:?} hit {:?}",
                r.head, r.macro_auc, r.macro_f1, r.macro_iou, r.macro_dice, r.argmax_hit_rate);
        }
    }
}
