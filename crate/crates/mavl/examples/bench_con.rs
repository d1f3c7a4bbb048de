// scratch: diagnose the contrastive pathway on the trained checkpoint
use mavl::corpus::split::{load_split, load_corpus_kb, SplitKind};
use mavl::trainer::load_model;

fn main() {
    let dir = std::env::temp_dir().join(std::env::args().nth(1).unwrap_or("mavl_learn_corpus".into()));
    let out = std::env::temp_dir().join(std::env::args().nth(4).unwrap_or("mavl_learn_run".into()));
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = load_corpus_kb(&dir).unwrap();
    let which_split = std::env::args().nth(2).unwrap_or("unseen".into());
    let samples = load_split(&dir, if which_split == "seen" { SplitKind::TestSeen } else { SplitKind::TestUnseen }).unwrap();
    let disease = std::env::args().nth(3).unwrap_or("d11".into());
    let q11 = model.query_set(&kb, &disease).unwrap();
    let qh = model.query_set(&kb, "healthy").unwrap();
    let j11 = kb.disease_index(&disease).unwrap();

    let mut peak = 0.0f64;
    let mut n = 0.0;
    let (mut pos_dots, mut neg_dots) = (vec![0.0; 9], vec![0.0; 9]);
    let (mut pos_h, mut neg_h) = (vec![0.0; 9], vec![0.0; 9]);
    let (mut npos, mut nneg) = (0.0, 0.0);
    for s in samples.iter().take(120) {
        let map = model.encode_image(&s.image).unwrap();
        let pooled = model.attention_pool(&map).unwrap();
        peak += pooled.attention.iter().cloned().fold(f64::MIN, f64::max);
        n += 1.0;
        let positive = s.target.presence[j11] == 1;
        for k in 0..9 {
            let d = pooled.vector.dot(&q11.embeddings.row(k));
            let h = pooled.vector.dot(&qh.embeddings.row(k));
            if positive { pos_dots[k] += d; pos_h[k] += h; } else { neg_dots[k] += d; neg_h[k] += h; }
        }
        if positive { npos += 1.0 } else { nneg += 1.0 };
    }
    println!("mean pool attention max: {:.4} (uniform = 0.0625)", peak / n);
    println!("{disease} slots", disease=disease); println!("slots (desc,texture,shape,opacity,location,border,fluid,focality,other):");
    for k in 0..9 {
        println!("  slot {k}: pos f.a={:+.3} f.h={:+.3} | neg f.a={:+.3} f.h={:+.3}",
            pos_dots[k]/npos, pos_h[k]/npos, neg_dots[k]/nneg, neg_h[k]/nneg);
    }
}
