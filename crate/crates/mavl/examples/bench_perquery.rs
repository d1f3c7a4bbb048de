// scratch: per-query decoder attention peakiness on trained checkpoint
use mavl::corpus::split::{load_split, load_corpus_kb, SplitKind};
use mavl::trainer::load_model;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (mut model, _) = load_model(&out.join("best.ckpt")).unwrap();
    model.config.per_aspect_heatmaps = true;
    let kb = load_corpus_kb(&dir).unwrap();
    let samples = load_split(&dir, SplitKind::TestSeen).unwrap();

    // average per-query peakiness + in-mask mass over single-lesion samples
    let mut per_q_peak = vec![0.0f64; 9];
    let mut per_q_mass = vec![0.0f64; 9];
    let mut avg_mass = 0.0f64;
    let mut count = 0.0;
    for s in samples.iter() {
        if s.masks.len() != 1 { continue; }
        let (name, mask) = s.masks.iter().next().unwrap();
        let q = model.query_set(&kb, name).unwrap();
        let map = model.encode_image(&s.image).unwrap();
        let g = model.ground(&q, &map).unwrap();
        // coarse mask occupancy
        let mut cell_in_mask = [[false; 4]; 4];
        for cy in 0..4 { for cx in 0..4 {
            let mut cover = 0;
            for y in cy*16..(cy+1)*16 { for x in cx*16..(cx+1)*16 { cover += mask[(y,x)] as usize; }}
            cell_in_mask[cy][cx] = cover > 20;
        }}
        for (k, hm) in g.per_query_heatmaps.as_ref().unwrap().iter().enumerate() {
            per_q_peak[k] += hm.iter().cloned().fold(f64::MIN, f64::max);
            let mass: f64 = hm.indexed_iter()
                .filter(|((y, x), _)| cell_in_mask[*y][*x])
                .map(|(_, &v)| v).sum();
            per_q_mass[k] += mass;
        }
        let mass: f64 = g.heatmap.indexed_iter()
            .filter(|((y, x), _)| cell_in_mask[*y][*x])
            .map(|(_, &v)| v).sum();
        avg_mass += mass;
        count += 1.0;
    }
    println!("samples: {count}");
    println!("query-averaged heatmap in-mask mass: {:.3}", avg_mass / count);
    for k in 0..9 {
        println!("  query {k}: peak {:.3}  in-mask mass {:.3}", per_q_peak[k]/count, per_q_mass[k]/count);
    }
}
