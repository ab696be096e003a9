use std::io::{BufRead, BufReader, Read, Write};

use super::{ChannelDescriptor, DataError, InterventionEvent};

/// A multichannel series with one timestamp per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub channel_names: Vec<String>,
    pub timestamps: Vec<i64>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }
}

/// Writes `timestamp,ch0,ch1,...`. Without explicit timestamps the row
/// index is used.
pub fn write_series_csv<W: Write>(
    w: W,
    rows: &[Vec<f64>],
    timestamps: Option<&[i64]>,
) -> Result<(), DataError> {
    let c = rows.first().map_or(0, Vec::len);
    if let Some(ts) = timestamps {
        if ts.len() != rows.len() {
            return Err(DataError::Dimension(format!(
                "{} timestamps for {} rows",
                ts.len(),
                rows.len()
            )));
        }
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..c).map(|j| format!("ch{j}")));
    out.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != c {
            return Err(DataError::Dimension("ragged series rows".into()));
        }
        let t = timestamps.map_or(i as i64, |ts| ts[i]);
        let mut rec = vec![t.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:?}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_series_csv<R: Read>(r: R) -> Result<Series, DataError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("timestamp") || header.len() < 2 {
        return Err(DataError::Format(
            "series header must be timestamp,<channel>...".into(),
        ));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| DataError::Format(format!("row {}: {what}", i + 2));
        let t: i64 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad timestamp"))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        if vals.len() != channel_names.len() {
            return Err(bad("wrong number of channels"));
        }
        if timestamps.last().is_some_and(|p| *p >= t) {
            return Err(DataError::Validation(format!(
                "row {}: timestamps must increase",
                i + 2
            )));
        }
        timestamps.push(t);
        rows.push(vals);
    }
    Ok(Series {
        channel_names,
        timestamps,
        rows,
    })
}

fn check_text(text: &str) -> Result<(), DataError> {
    if text.contains('\t') || text.contains('\n') {
        return Err(DataError::Format(format!(
            "text may not contain tabs or newlines: {text:?}"
        )));
    }
    Ok(())
}

pub fn write_events_tsv<W: Write>(mut w: W, events: &[InterventionEvent]) -> Result<(), DataError> {
    for e in events {
        check_text(&e.text)?;
        writeln!(w, "{}\t{}", e.timestamp, e.text)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `timestamp<TAB>text` lines. Order is preserved; sortedness is
/// checked at alignment time.
pub fn read_events_tsv<R: Read>(r: R) -> Result<Vec<InterventionEvent>, DataError> {
    let mut out = Vec::new();
    for (no, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (t, text) = line
            .split_once('\t')
            .ok_or_else(|| DataError::Format(format!("line {}: expected timestamp<TAB>text", no + 1)))?;
        let t = t
            .trim()
            .parse()
            .map_err(|_| DataError::Format(format!("line {}: bad timestamp {t:?}", no + 1)))?;
        out.push(InterventionEvent::new(t, text));
    }
    Ok(out)
}

pub fn write_descriptors_tsv<W: Write>(
    mut w: W,
    descriptors: &[ChannelDescriptor],
) -> Result<(), DataError> {
    for d in descriptors {
        check_text(&d.text)?;
        writeln!(w, "{}\t{}", d.channel_index, d.text)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `channel_index<TAB>text` and returns the texts in channel order.
/// Every channel in `0..n` must appear exactly once.
pub fn read_descriptors_tsv<R: Read>(r: R) -> Result<Vec<String>, DataError> {
    let mut pairs: Vec<(usize, String)> = Vec::new();
    for (no, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (i, text) = line
            .split_once('\t')
            .ok_or_else(|| DataError::Format(format!("line {}: expected index<TAB>text", no + 1)))?;
        let i = i
            .trim()
            .parse()
            .map_err(|_| DataError::Format(format!("line {}: bad channel index", no + 1)))?;
        pairs.push((i, text.to_string()));
    }
    pairs.sort_by_key(|p| p.0);
    for (k, (i, _)) in pairs.iter().enumerate() {
        if *i != k {
            return Err(DataError::Validation(format!(
                "descriptor indices must cover 0..{} exactly once",
                pairs.len()
            )));
        }
    }
    Ok(pairs.into_iter().map(|p| p.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_roundtrip() {
        let rows = vec![vec![0.1, -2.5], vec![1.0 / 3.0, 4.0], vec![0.0, 1e-300]];
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &rows, Some(&[5, 6, 9])).unwrap();
        let s = read_series_csv(buf.as_slice()).unwrap();
        assert_eq!(s.rows, rows);
        assert_eq!(s.timestamps, vec![5, 6, 9]);
        assert_eq!(s.channel_names, vec!["ch0", "ch1"]);
    }

    #[test]
    fn series_rejects_bad_rows() {
        assert!(read_series_csv("timestamp,a\n0,1\n0,2\n".as_bytes()).is_err());
        assert!(read_series_csv("timestamp,a\n0,x\n".as_bytes()).is_err());
        assert!(read_series_csv("t,a\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn events_and_descriptors_roundtrip() {
        let ev = vec![
            InterventionEvent::new(3, "rain expected"),
            InterventionEvent::new(7, "The waveform will go steady."),
        ];
        let mut buf = Vec::new();
        write_events_tsv(&mut buf, &ev).unwrap();
        assert_eq!(read_events_tsv(buf.as_slice()).unwrap(), ev);

        let d = vec![
            ChannelDescriptor::hashed(1, "temperature", 16),
            ChannelDescriptor::hashed(0, "pressure", 16),
        ];
        let mut buf = Vec::new();
        write_descriptors_tsv(&mut buf, &d).unwrap();
        assert_eq!(
            read_descriptors_tsv(buf.as_slice()).unwrap(),
            vec!["pressure", "temperature"]
        );
        assert!(read_descriptors_tsv("0\ta\n2\tb\n".as_bytes()).is_err());
        assert!(write_events_tsv(Vec::new(), &[InterventionEvent::new(0, "a\tb")]).is_err());
    }
}
