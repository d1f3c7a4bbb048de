// scratch: inspect coarse attention vs mask cell occupancy
use mavl::corpus::split::{load_split, SplitKind};
use mavl::trainer::load_model;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = mavl::corpus::split::load_corpus_kb(&dir).unwrap();
    let samples = load_split(&dir, SplitKind::TestSeen).unwrap();

    let mut shown = 0;
    for s in &samples {
        let Some((name, mask)) = s.masks.iter().next() else { continue };
        if s.masks.len() != 1 { continue; }
        let q = model.query_set(&kb, name).unwrap();
        let map = model.encode_image(&s.image).unwrap();
        let g = model.ground(&q, &map).unwrap();
        // coarse mask occupancy: fraction of each 16x16 block covered
        println!("disease {name}:");
        for cy in 0..4 {
            let mut row_h = String::new();
            let mut row_m = String::new();
            for cx in 0..4 {
                row_h.push_str(&format!("{:.3} ", g.heatmap[(cy, cx)]));
                let mut cover = 0;
                for y in cy*16..(cy+1)*16 { for x in cx*16..(cx+1)*16 {
                    cover += mask[(y, x)] as usize; }}
                row_m.push_str(&format!("{:5} ", cover));
            }
            println!("  attn [{row_h}]  mask [{row_m}]");
        }
        shown += 1;
        if shown >= 3 { break; }
    }
}
