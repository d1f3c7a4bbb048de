// scratch: which decoder layer's attention tracks the lesion?
use mavl::autodiff::Tape;
use mavl::corpus::split::{load_corpus_kb, load_split, SplitKind};
use mavl::model::graph;
use mavl::trainer::load_model;
use ndarray::Array2;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = load_corpus_kb(&dir).unwrap();
    let samples = load_split(&dir, SplitKind::TestSeen).unwrap();

    let mut mass = vec![0.0f64; model.config.decoder_layers];
    let mut count = 0.0;
    for s in samples.iter() {
        if s.masks.len() != 1 { continue; }
        let (name, mask) = s.masks.iter().next().unwrap();
        let q = model.query_set(&kb, name).unwrap();
        let mut tape = Tape::new();
        let bound = graph::bind(&mut tape, &model, false);
        let cells = graph::encode_cells(&mut tape, &bound, &s.image);
        let g = graph::ground(&mut tape, &bound, &q.embeddings, cells, None);

        let mut cell_in_mask = [[false; 4]; 4];
        for cy in 0..4 { for cx in 0..4 {
            let mut cover = 0;
            for y in cy*16..(cy+1)*16 { for x in cx*16..(cx+1)*16 { cover += mask[(y,x)] as usize; }}
            cell_in_mask[cy][cx] = cover > 20;
        }}
        for (l, heads) in g.attn_layers.iter().enumerate() {
            let mut layer_map = Array2::<f64>::zeros((9, 16));
            for &h in heads { layer_map += tape.value(h); }
            layer_map /= heads.len() as f64;
            let flat = layer_map.mean_axis(ndarray::Axis(0)).unwrap();
            let m: f64 = flat.iter().enumerate()
                .filter(|(c, _)| cell_in_mask[c / 4][c % 4])
                .map(|(_, &v)| v).sum();
            mass[l] += m;
        }
        count += 1.0;
    }
    for (l, m) in mass.iter().enumerate() {
        println!("layer {l}: mean in-mask attention mass {:.3} over {count} samples", m / count);
    }
}
