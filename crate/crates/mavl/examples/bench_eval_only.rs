// scratch: re-evaluate the existing checkpoint with referenced heatmaps
use mavl::corpus::split::{load_corpus_kb, SplitKind};
use mavl::eval::{evaluate_split, select_grounding_threshold, EvalConfig, HeadChoice};
use mavl::trainer::load_model;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = load_corpus_kb(&dir).unwrap();
    let seen: Vec<String> = kb.seen_diseases().iter().map(|d| d.name.clone()).collect();
    let gthr = select_grounding_threshold(&model, &kb, &dir, &seen).unwrap();
    println!("grounding threshold: {gthr}");
    let ecfg = EvalConfig { head: HeadChoice::Both, grounding_threshold: gthr, ..EvalConfig::default() };
    for split in [SplitKind::TestSeen, SplitKind::TestUnseen] {
        for r in evaluate_split(&model, &kb, &dir, split, &ecfg).unwrap() {
            println!("{split} {:?}: AUC {:.4} F1 {:.4} IoU {:?} Dice {:?} hit {:?}",
                r.head, r.macro_auc, r.macro_f1,
                r.macro_iou.map(|v| (v*1e3).round()/1e3),
                r.macro_dice.map(|v| (v*1e3).round()/1e3),
                r.argmax_hit_rate.map(|v| (v*1e3).round()/1e3));
        }
    }
}
