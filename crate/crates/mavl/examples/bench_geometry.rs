// scratch: how separable are the canonical aspect phrases?
use mavl::corpus::render::{default_generator_config, derive_kb};
use mavl::text::TextEmbedder;

fn main() {
    let cfg = default_generator_config();
    let kb = derive_kb(&cfg);
    let emb = TextEmbedder::new(1, 64);
    // similarity between different texture phrases
    let textures = ["fine grainy speckled texture with small mottled spots",
                    "linear streaky texture with fine parallel strands",
                    "smooth even texture without internal markings",
                    "honeycomb texture of small clustered cells"];
    println!("texture x texture cosines:");
    for a in &textures {
        let va = emb.encode(a).unwrap();
        let row: Vec<String> = textures.iter()
            .map(|b| format!("{:.3}", va.dot(&emb.encode(b).unwrap())))
            .collect();
        println!("  {}", row.join(" "));
    }
    // per-disease query-set similarity matrix at position 0 (descriptions)
    println!("description cosines (d1..d5 + healthy):");
    let names = ["d1","d2","d3","d4","d5","healthy"];
    for a in &names {
        let ta = &kb.disease(a).unwrap().description;
        let va = emb.encode(ta).unwrap();
        let row: Vec<String> = names.iter()
            .map(|b| {
                let tb = &kb.disease(b).unwrap().description;
                format!("{:.3}", va.dot(&emb.encode(tb).unwrap()))
            })
            .collect();
        println!("  {}", row.join(" "));
    }
}
