use std::fmt::Write;
use std::path::Path;

use iatsf::dataio::{cosine, embed_text_hash};

const CORPUS: &[&str] = &[
    "Channel 1 will change to frequency 5 in 3 timesteps.",
    "Channel 1 will change to frequency 3 in 5 timesteps.",
    "Channel 1 will keep steady with frequency of 7.",
    "The waveform will go steady.",
    "Central bank cuts the policy rate by 50 basis points",
    "Heatwave expected across the region through Friday",
    "Refinery outage trims regional supply",
    "naïve café: résumé, façade!",
    "  MIXED   case\tand\nwhitespace  ",
    "a",
];

const DIM: usize = 32;

fn render() -> String {
    let mut out = String::new();
    for text in CORPUS {
        let v = embed_text_hash(text, DIM).unwrap();
        let bits: Vec<String> = v.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
        writeln!(out, "{}\t{}", text.escape_default(), bits.join(" ")).unwrap();
    }
    out
}

#[test]
fn hash_embeddings_match_golden_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/embed_golden.tsv");
    let fresh = render();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &fresh).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(fresh, golden);
}

#[test]
fn empty_text_has_no_embedding() {
    assert!(embed_text_hash("", DIM).is_none());
    assert!(embed_text_hash("  \t ", DIM).is_none());
}

#[test]
fn swapped_numbers_stay_distinguishable() {
    let a = embed_text_hash(CORPUS[0], DIM).unwrap();
    let b = embed_text_hash(CORPUS[1], DIM).unwrap();
    let c = cosine(&a, &b);
    assert!(c < 0.95, "{c}");
    assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
}
