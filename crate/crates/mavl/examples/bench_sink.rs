// scratch: is there an attention sink? does healthy-contrast reveal lesions?
use mavl::corpus::split::{load_corpus_kb, load_split, SplitKind};
use mavl::trainer::load_model;
use ndarray::Array2;

fn main() {
    let dir = std::env::temp_dir().join("mavl_learn_corpus");
    let out = std::env::temp_dir().join("mavl_learn_run");
    let (model, _) = load_model(&out.join("best.ckpt")).unwrap();
    let kb = load_corpus_kb(&dir).unwrap();
    let samples = load_split(&dir, SplitKind::TestSeen).unwrap();
    let qh = model.query_set(&kb, "healthy").unwrap();

    let mut shown = 0;
    for s in &samples {
        if s.masks.len() != 1 { continue; }
        let (name, mask) = s.masks.iter().next().unwrap();
        let q = model.query_set(&kb, name).unwrap();
        let map = model.encode_image(&s.image).unwrap();
        let gd = model.ground(&q, &map).unwrap();
        let gh = model.ground(&qh, &map).unwrap();
        println!("disease {name}:");
        let mut mask_cells = String::new();
        for cy in 0..4 { for cx in 0..4 {
            let mut cover = 0;
            for y in cy*16..(cy+1)*16 { for x in cx*16..(cx+1)*16 { cover += mask[(y,x)] as usize; }}
            if cover > 20 { mask_cells.push_str(&format!("({cy},{cx}) ")); }
        }}
        println!("  mask cells: {mask_cells}");
        let diff: Array2<f64> = mavl::eval::healthy_referenced_heatmap(&gd.heatmap, &gh.heatmap);
        for cy in 0..4 {
            let d_row: Vec<String> = (0..4).map(|cx| format!("{:+.3}", gd.heatmap[(cy,cx)])).collect();
            let h_row: Vec<String> = (0..4).map(|cx| format!("{:+.3}", gh.heatmap[(cy,cx)])).collect();
            let x_row: Vec<String> = (0..4).map(|cx| format!("{:+.3}", diff[(cy,cx)])).collect();
            println!("  dis [{}]  hlt [{}]  diff [{}]", d_row.join(" "), h_row.join(" "), x_row.join(" "));
        }
        shown += 1;
        if shown >= 3 { break; }
    }
}
