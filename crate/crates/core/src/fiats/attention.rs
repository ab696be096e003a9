use std::path::Path;

use super::{AttentionMaps, Result};

/// Attention maps flattened to long-format CSV tables.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    /// `block,patch,channel,slot,weight`
    pub casm_csv: String,
    /// `layer,channel,query_patch,key,key_kind,weight`; keys index history
    /// patches first, then future patches.
    pub caps_csv: String,
}

impl AttentionExport {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("casm_attention.csv"), &self.casm_csv)?;
        std::fs::write(dir.join("caps_attention.csv"), &self.caps_csv)?;
        Ok(())
    }
}

pub fn export_attention(maps: &AttentionMaps, channel_names: &[String]) -> AttentionExport {
    let name = |c: usize| channel_names.get(c).cloned().unwrap_or_else(|| format!("ch{c}"));
    let mut casm = String::from("block,patch,channel,slot,weight\n");
    for (b, block) in maps.casm.iter().enumerate() {
        for (p, chans) in block.iter().enumerate() {
            for (c, row) in chans.iter().enumerate() {
                for (s, w) in row.iter().enumerate() {
                    casm.push_str(&format!("{b},{p},{},{s},{w:?}\n", name(c)));
                }
            }
        }
    }
    let mut caps = String::from("layer,channel,query_patch,key,key_kind,weight\n");
    for (l, layer) in maps.caps.iter().enumerate() {
        for (c, rows) in layer.iter().enumerate() {
            let n_future = rows.len();
            for (p, row) in rows.iter().enumerate() {
                let n_hist = row.len() - n_future;
                for (k, w) in row.iter().enumerate() {
                    let kind = if k < n_hist { "history" } else { "future" };
                    caps.push_str(&format!("{l},{},{p},{k},{kind},{w:?}\n", name(c)));
                }
            }
        }
    }
    AttentionExport {
        casm_csv: casm,
        caps_csv: caps,
    }
}
