// scratch: activation norms feeding the normalize ops
use mavl::autodiff::Tape;
use mavl::corpus::split::{load_corpus_kb, load_split, SplitKind};
use mavl::model::graph;
use mavl::trainer::load_model;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = load_corpus_kb(&dir).unwrap();
    let samples = load_split(&dir, SplitKind::TestSeen).unwrap();

    let mut cell_norm = 0.0f64;
    let mut n = 0.0;
    for s in samples.iter().take(20) {
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, &model, false);
        let cells = graph::encode_cells(&mut tape, &bound, &s.image);
        let v = tape.value(cells);
        cell_norm += v.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / 16.0;
        // replicate pool forward up to pre-normalization
        let pooled = graph::attention_pool(&mut tape, &bound, cells);
        // pre-norm vector: recompute by re-running mha... instead read normalized and check the raw ctx by value of the op before normalize: use tape len - 1?
        // simpler: the normalized output's input. we cheat: compute norm of (Wo ctx + bo) via value of node before l2 (id of feature - 1 is the linear out)
        let _ = pooled;
        n += 1.0;
    }
    println!("mean encoder cell norm: {:.2}", cell_norm / n);
    // weight norms
    for name in ["pool.wo", "pool.wq", "pool.wk", "pool.wv", "pool.bo"] {
        let w = model.params.get(name);
        let fro = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name}: frobenius {:.3}", fro);
    }
}
