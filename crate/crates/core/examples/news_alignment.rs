//! Hash-embeds a few headlines and attaches them to forecast patches.

use iatsf::dataio::{align_interventions, cosine, embed_text_hash, InterventionEvent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dim = 32;
    let news = [
        (3, "Central bank holds rates"),
        (9, "Central bank cuts rates by 50 basis points"),
        (9, "Storm closes the northern port"),
        (17, "Port reopens after the storm"),
    ];
    let events: Vec<_> = news
        .iter()
        .map(|(t, text)| InterventionEvent::new(*t, *text).with_embedding(embed_text_hash(text, dim).unwrap()))
        .collect();
    let a = embed_text_hash(news[0].1, dim).unwrap();
    let b = embed_text_hash(news[1].1, dim).unwrap();
    println!("cosine(hold, cut) = {:.3}", cosine(&a, &b));

    let patch_starts = [0, 8, 12, 16, 20];
    let slab = align_interventions(&events, &patch_starts, 2, dim)?;
    for (p, start) in patch_starts.iter().enumerate() {
        let attached: Vec<_> = (0..slab.slots)
            .filter_map(|k| slab.timestamps[p * slab.slots + k])
            .collect();
        println!("patch at t={start:<3} sees events stamped {attached:?}");
    }
    Ok(())
}
