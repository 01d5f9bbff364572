//! Plain-text split manifests.
//!
//! ```text
//! # riskseg-manifest 1
//! # split train
//! # base_seed 5
//! # skipped 0
//! # scene size=64 min_distractors=2 ...
//! # fields index seed tokens expression objects target_shape target_bbox target_area
//! 0<TAB>72057594037927937<TAB>1,2,6,0,...<TAB>the red disk<TAB>5<TAB>disk<TAB>10,12,20,22<TAB>78
//! ```
//!
//! One record per line in the field order above. Token ids and the bounding
//! box (`x0,y0,x1,y1`, exclusive max) are comma-separated.

use super::{ManifestEntry, Query, SceneConfig, ShapeKind, SplitKind, SplitManifest};
use crate::error::{Error, Result};

pub const MAGIC: &str = "# riskseg-manifest";
pub const VERSION: u32 = 1;
pub const FIELDS: &str = "index seed tokens expression objects target_shape target_bbox target_area";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_manifest(m: &SplitManifest) -> String {
    let mut s = format!("{MAGIC} {VERSION}\n");
    s += &format!("# split {}\n", m.split.name());
    s += &format!("# base_seed {}\n", m.base_seed);
    s += &format!("# skipped {}\n", m.skipped);
    s += &format!("# scene {}\n", m.scene.to_kv());
    s += &format!("# fields {FIELDS}\n");
    for e in &m.entries {
        s += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.index,
            e.seed,
            join(&e.query.tokens(m.scene.max_len)),
            e.query.text(),
            e.objects,
            e.target_shape.name(),
            join(&e.target_bbox),
            e.target_area
        );
    }
    s
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("manifest line {line}: {msg}"))
}

fn header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<(usize, &'a str)> {
    let (no, line) = lines.next().ok_or_else(|| bad(0, format!("missing header {key}")))?;
    let rest = line
        .strip_prefix("# ")
        .and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| bad(no, format!("expected header {key:?}")))?;
    Ok((no, rest))
}

pub fn parse_manifest(text: &str) -> Result<SplitManifest> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (no, version) = header(&mut lines, "riskseg-manifest")?;
    if version.trim() != VERSION.to_string() {
        return Err(bad(no, format!("unsupported manifest version {version:?}")));
    }
    let (no, split) = header(&mut lines, "split")?;
    let split = SplitKind::from_name(split.trim()).ok_or_else(|| bad(no, "unknown split"))?;
    let (no, base) = header(&mut lines, "base_seed")?;
    let base_seed = base.trim().parse().map_err(|_| bad(no, "bad base_seed"))?;
    let (no, skipped) = header(&mut lines, "skipped")?;
    let skipped = skipped.trim().parse().map_err(|_| bad(no, "bad skipped count"))?;
    let (_, scene) = header(&mut lines, "scene")?;
    let scene = SceneConfig::from_kv(scene)?;
    let (no, fields) = header(&mut lines, "fields")?;
    if fields.trim() != FIELDS {
        return Err(bad(no, "unexpected field list"));
    }
    let mut entries = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad(no, format!("expected 8 fields, found {}", f.len())));
        }
        let nums = |s: &str| -> Result<Vec<u64>> {
            s.split(',').map(|x| x.parse::<u64>().map_err(|_| bad(no, format!("bad number {x:?}")))).collect()
        };
        let tokens: Vec<u32> = nums(f[2])?.into_iter().map(|x| x as u32).collect();
        let query = Query::from_tokens(&tokens).ok_or_else(|| bad(no, "tokens do not form an expression"))?;
        if query.text() != f[3] {
            return Err(bad(no, "expression text does not match tokens"));
        }
        let bbox = nums(f[6])?;
        if bbox.len() != 4 {
            return Err(bad(no, "bbox needs 4 numbers"));
        }
        entries.push(ManifestEntry {
            index: f[0].parse().map_err(|_| bad(no, "bad index"))?,
            seed: f[1].parse().map_err(|_| bad(no, "bad seed"))?,
            query,
            objects: f[4].parse().map_err(|_| bad(no, "bad object count"))?,
            target_shape: ShapeKind::from_name(f[5]).ok_or_else(|| bad(no, "bad shape"))?,
            target_bbox: [bbox[0] as usize, bbox[1] as usize, bbox[2] as usize, bbox[3] as usize],
            target_area: f[7].parse().map_err(|_| bad(no, "bad area"))?,
        });
    }
    Ok(SplitManifest {
        split,
        base_seed,
        scene,
        entries,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{make_split, regenerate};
    use super::*;

    #[test]
    fn manifest_round_trips_and_regenerates() {
        let cfg = SceneConfig::default();
        let (m, recs) = make_split(12, &cfg, 9, SplitKind::Val).unwrap();
        let text = write_manifest(&m);
        assert!(text.starts_with("# riskseg-manifest 1\n"));
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(regenerate(&back).unwrap(), recs);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_manifest("# riskseg-manifest 2\n").is_err());
        let cfg = SceneConfig::default();
        let (m, _) = make_split(2, &cfg, 9, SplitKind::Test).unwrap();
        let text = write_manifest(&m).replace("\tthe ", "\tthe the ");
        assert!(parse_manifest(&text).is_err());
    }
}
