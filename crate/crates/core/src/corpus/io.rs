//! Dataset directory format.
//!
//! ```text
//! <dir>/vocab.txt          one symbol per line, blank first; last line `separator <c>`
//! <dir>/manifest.tsv       id, domain, split, frames, transcript
//! <dir>/features/<split>.bin
//! <dir>/lm_text.txt        one character sequence per line
//! ```
//!
//! A feature file is `CSTLFEAT`, a little-endian `u32` version, `u32`
//! feature dimension and `u64` utterance count, followed per utterance by a
//! `u32` frame count and `frames × dim` little-endian `f32` values in
//! manifest order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Corpus, Domain, Utterance, Vocab};
use crate::error::{CastleError, Result};

const FEATURE_MAGIC: &[u8; 8] = b"CSTLFEAT";
const FEATURE_VERSION: u32 = 1;
const SPLITS: [&str; 5] = ["labeled_source", "unlabeled_source", "unlabeled_target", "dev", "test"];

fn splits(c: &Corpus) -> [&Vec<Utterance>; 5] {
    [
        &c.labeled_source,
        &c.unlabeled_source,
        &c.unlabeled_target,
        &c.dev,
        &c.test,
    ]
}

pub fn write_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| CastleError::io(&feat_dir, e))?;

    let vocab_path = dir.join("vocab.txt");
    let mut vocab_text: String = corpus.vocab.symbols().iter().map(|c| format!("{c}\n")).collect();
    vocab_text.push_str(&format!("separator {}\n", corpus.vocab.separator()));
    fs::write(&vocab_path, vocab_text).map_err(|e| CastleError::io(&vocab_path, e))?;

    let mut manifest = String::from("id\tdomain\tsplit\tframes\ttranscript\n");
    for (name, utts) in SPLITS.iter().zip(splits(corpus)) {
        for u in utts {
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id,
                u.domain.as_str(),
                name,
                u.frames,
                u.transcript.as_deref().unwrap_or("")
            ));
        }
        let path = feat_dir.join(format!("{name}.bin"));
        let file = fs::File::create(&path).map_err(|e| CastleError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let dim = utts.first().map_or(corpus.feat_dim(), |u| u.feat_dim) as u32;
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CastleError::io(&path, e));
        write(FEATURE_MAGIC)?;
        write(&FEATURE_VERSION.to_le_bytes())?;
        write(&dim.to_le_bytes())?;
        write(&(utts.len() as u64).to_le_bytes())?;
        for u in utts {
            write(&(u.frames as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(u.features.len() * 4);
            for x in &u.features {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            write(&buf)?;
        }
        w.flush().map_err(|e| CastleError::io(&path, e))?;
    }
    let manifest_path = dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| CastleError::io(&manifest_path, e))?;

    let lm_path = dir.join("lm_text.txt");
    let lm: String = corpus.lm_text.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&lm_path, lm).map_err(|e| CastleError::io(&lm_path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CastleError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    let mut symbols = Vec::new();
    let mut separator = None;
    for line in text.lines() {
        if let Some(sep) = line.strip_prefix("separator ") {
            separator = sep.chars().next();
            continue;
        }
        let mut chars = line.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => symbols.push(c),
            _ => return Err(CastleError::format(path, format!("bad vocabulary line {line:?}"))),
        }
    }
    let separator = separator.ok_or_else(|| CastleError::format(path, "missing separator line"))?;
    Vocab::new(symbols, separator).map_err(|e| CastleError::format(path, e.to_string()))
}

struct ManifestRow {
    id: String,
    domain: Domain,
    split: usize,
    frames: usize,
    transcript: String,
}

fn read_manifest(path: &Path, vocab: &Vocab) -> Result<Vec<ManifestRow>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("id\tdomain\tsplit\tframes\ttranscript") {
        return Err(CastleError::format(path, "missing or wrong header"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| CastleError::format(path, format!("line {}: {m}", n + 2));
        if fields.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let domain = match fields[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(bad(&format!("unknown domain {other:?}"))),
        };
        let split = SPLITS
            .iter()
            .position(|s| *s == fields[2])
            .ok_or_else(|| bad(&format!("unknown split {:?}", fields[2])))?;
        let frames: usize = fields[3].parse().map_err(|_| bad("frames is not an integer"))?;
        let transcript = fields[4].to_string();
        if vocab.encode(&transcript).is_err() {
            return Err(bad("transcript uses symbols outside the vocabulary"));
        }
        if frames < 1 || frames < transcript.chars().count() {
            return Err(bad(&format!(
                "{frames} frames cannot carry a {}-symbol transcript",
                transcript.chars().count()
            )));
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            domain,
            split,
            frames,
            transcript,
        });
    }
    Ok(rows)
}

fn read_features(path: &Path, rows: &[&ManifestRow]) -> Result<(usize, Vec<Vec<f32>>)> {
    let mut file = fs::File::open(path).map_err(|e| CastleError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| CastleError::io(path, e))?;
    let mut cur = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(cur..cur + n)
            .ok_or_else(|| CastleError::format(path, "truncated feature file"))?;
        cur += n;
        Ok(s)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err(CastleError::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(CastleError::format(path, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != rows.len() {
        return Err(CastleError::format(
            path,
            format!("{count} utterances but the manifest lists {}", rows.len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for row in rows {
        let frames = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if frames != row.frames {
            return Err(CastleError::format(
                path,
                format!("{}: {frames} frames, manifest says {}", row.id, row.frames),
            ));
        }
        let raw = take(frames * dim * 4)?;
        out.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if cur != bytes.len() {
        return Err(CastleError::format(path, "trailing bytes"));
    }
    Ok((dim, out))
}

pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let vocab = read_vocab(&dir.join("vocab.txt"))?;
    let rows = read_manifest(&dir.join("manifest.tsv"), &vocab)?;
    let mut sets: [Vec<Utterance>; 5] = Default::default();
    let mut feat_dim = None;
    for (s, name) in SPLITS.iter().enumerate() {
        let split_rows: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == s).collect();
        let path = dir.join("features").join(format!("{name}.bin"));
        let (dim, feats) = read_features(&path, &split_rows)?;
        if !split_rows.is_empty() {
            if feat_dim.is_some_and(|d| d != dim) {
                return Err(CastleError::format(&path, "feature dimension differs between splits"));
            }
            feat_dim = Some(dim);
        }
        sets[s] = split_rows
            .into_iter()
            .zip(feats)
            .map(|(r, features)| Utterance {
                id: r.id.clone(),
                features,
                frames: r.frames,
                feat_dim: dim,
                transcript: Some(r.transcript.clone()),
                domain: r.domain,
            })
            .collect();
    }
    let lm_path = dir.join("lm_text.txt");
    let lm_text = read_text(&lm_path)?.lines().map(str::to_string).collect::<Vec<_>>();
    for l in &lm_text {
        vocab
            .encode(l)
            .map_err(|e| CastleError::format(&lm_path, e.to_string()))?;
    }
    let [labeled_source, unlabeled_source, unlabeled_target, dev, test] = sets;
    let corpus = Corpus {
        vocab,
        labeled_source,
        unlabeled_source,
        unlabeled_target,
        dev,
        test,
        lm_text,
    };
    corpus
        .validate()
        .map_err(|e| CastleError::format(dir, e.to_string()))?;
    Ok(corpus)
}
