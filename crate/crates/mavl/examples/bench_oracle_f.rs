// scratch: AUC ceiling with an ideal pooled vector built from the labels
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::corpus::split::{load_split, synthesize_corpus, SplitKind};
use mavl::eval::metrics::auc;
use mavl::text::TextEmbedder;
use ndarray::Array1;

fn main() {
    let mut cfg = default_generator_config();
    cfg.train = 10; cfg.valid = 10; cfg.test_seen = 10; cfg.test_unseen = 400;
    let kb = derive_kb(&cfg);
    let dir = std::env::temp_dir().join("mavl_oraclef_corpus");
    let _ = std::fs::remove_dir_all(&dir);
    synthesize_corpus(&dir, &kb, &cfg).unwrap();
    let samples = load_split(&dir, SplitKind::TestUnseen).unwrap();

    let emb = TextEmbedder::new(1, 64);
    let tau = 0.3;
    let qsets: Vec<ndarray::Array2<f64>> = kb.diseases.iter()
        .map(|d| emb.encode_rows(&kb.query_aspects(&d.name).unwrap()).unwrap())
        .collect();
    let healthy_idx = kb.disease_index("healthy").unwrap();

    for target_name in ["d11", "d12"] {
        let tj = kb.disease_index(target_name).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in &samples {
            // ideal pooled vector: normalized sum of present diseases' aspect rows
            let mut f = Array1::<f64>::zeros(64);
            for (j, &p) in s.target.presence.iter().enumerate() {
                if p == 1 {
                    for k in 0..qsets[j].nrows() { f += &qsets[j].row(k); }
                }
            }
            let n = f.dot(&f).sqrt();
            if n > 0.0 { f /= n; }
            let q = &qsets[tj];
            let h = &qsets[healthy_idx];
            let mut score = 0.0;
            for k in 0..q.nrows() {
                let zd = f.dot(&q.row(k)) / tau;
                let zh = f.dot(&h.row(k)) / tau;
                let m = zd.max(zh);
                score += (zd - m).exp() / ((zd - m).exp() + (zh - m).exp());
            }
            scores.push(score / q.nrows() as f64);
            labels.push(s.target.presence[tj]);
        }
        println!("{target_name}: ideal-f unseen AUC = {:.4}", auc(&scores, &labels).unwrap());
    }
}
