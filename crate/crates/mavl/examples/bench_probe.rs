// scratch: is the unseen inversion driven by distractors or by empties?
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::corpus::split::{synthesize_corpus, SplitKind};
use mavl::eval::{evaluate_split, EvalConfig, HeadChoice};
use mavl::trainer::load_model;

fn main() {
    let run = std::env::temp_dir().join("mavl_coniso_run");
    let (model, _) = load_model(&run.join("best.ckpt")).unwrap();

    for (label, distractor) in [("with distractors", 0.10), ("no distractors", 0.0)] {
        let mut cfg = default_generator_config();
        cfg.train = 4; cfg.valid = 4; cfg.test_seen = 4; cfg.test_unseen = 300;
        cfg.distractor_rate = distractor;
        cfg.seed = 123;
        let kb = derive_kb(&cfg);
        let dir = std::env::temp_dir().join(format!("mavl_probe_{}", (distractor * 100.0) as u32));
        let _ = std::fs::remove_dir_all(&dir);
        synthesize_corpus(&dir, &kb, &cfg).unwrap();
        let ecfg = EvalConfig { head: HeadChoice::Contrastive, ..EvalConfig::default() };
        let r = &evaluate_split(&model, &kb, &dir, SplitKind::TestUnseen, &ecfg).unwrap()[0];
        for d in &r.per_disease {
            println!("{label}: {} AUC {:?}", d.disease, d.auc.map(|a| (a * 1000.0).round() / 1000.0));
        }
    }
}
