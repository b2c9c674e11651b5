//! Reading and writing artifacts on disk. Writes go to a temporary file in
//! the destination directory and are renamed into place.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use morphprobe_core::conllu::{Corpus, Sentence, Split};
use morphprobe_core::control::ControlAssignment;
use morphprobe_core::embedding::EmbeddingCache;
use morphprobe_core::labels::LabelSpace;
use morphprobe_core::probe::ProbeModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::cache::{decode_cache, encode_cache, CacheManifest};
use crate::format::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::format::control::{decode_control, encode_control, ControlManifest};
use crate::format::FormatError;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads an upstream artifact; absence names the command that produces it.
pub fn read_artifact(path: &Path, producer: &'static str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command: producer,
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    let bytes = read_artifact(path, producer)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Sidecar manifest path: `x.mpec` -> `x.mpec.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_cache(path: &Path, cache: &EmbeddingCache, manifest: &CacheManifest) -> Result<()> {
    write_atomic(path, &encode_cache(cache))?;
    write_json(&manifest_path(path), manifest)
}

pub fn read_cache(path: &Path, producer: &'static str) -> Result<EmbeddingCache> {
    let bytes = read_artifact(path, producer)?;
    decode_cache(&bytes).map_err(|e| Error::format(path, e))
}

/// Reads a cache together with its manifest and checks that they agree.
pub fn read_cache_with_manifest(path: &Path, producer: &'static str) -> Result<(EmbeddingCache, CacheManifest)> {
    let cache = read_cache(path, producer)?;
    let manifest: CacheManifest = read_json(&manifest_path(path), producer)?;
    if !manifest.matches(&cache) {
        return Err(Error::format(
            path,
            FormatError::Invalid("manifest does not describe this cache".into()),
        ));
    }
    Ok((cache, manifest))
}

pub fn write_checkpoint(path: &Path, model: &ProbeModel, space: &LabelSpace) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, space))
}

pub fn read_checkpoint(path: &Path, space: &LabelSpace) -> Result<ProbeModel> {
    let bytes = read_artifact(path, "train")?;
    decode_checkpoint(&bytes, space).map_err(|e| Error::format(path, e))
}

pub fn write_control(path: &Path, ctl: &ControlAssignment, manifest: &ControlManifest) -> Result<()> {
    write_atomic(path, &encode_control(ctl))?;
    write_json(&manifest_path(path), manifest)
}

pub fn read_control(path: &Path) -> Result<ControlAssignment> {
    let manifest: ControlManifest = read_json(&manifest_path(path), "control")?;
    let bytes = read_artifact(path, "control")?;
    decode_control(&bytes, &manifest).map_err(|e| Error::format(path, e))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    language_code: String,
    split: Split,
    sentences: usize,
}

/// JSON lines: a header line, then one sentence per line.
pub fn corpus_to_jsonl(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    let header = CorpusHeader {
        language_code: corpus.language_code.clone(),
        split: corpus.split,
        sentences: corpus.sentences.len(),
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for s in &corpus.sentences {
        serde_json::to_writer(&mut out, s).expect("sentence serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, &corpus_to_jsonl(corpus))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = read_artifact(path, "ingest")?;
    let json_err = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let mut lines = bytes.lines();
    let header: CorpusHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?).map_err(json_err)?,
        None => return Err(Error::data(path.display().to_string(), "empty corpus file")),
    };
    let sentences = lines
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<Sentence>(&l).map_err(json_err)
        })
        .collect::<Result<Vec<_>>>()?;
    if sentences.len() != header.sentences {
        return Err(Error::data(
            path.display().to_string(),
            format!("header announces {} sentences, found {}", header.sentences, sentences.len()),
        ));
    }
    Ok(Corpus::new(&header.language_code, header.split, sentences))
}

#[cfg(test)]
mod tests {
    use super::*;
    use morphprobe_core::conllu::Token;
    use morphprobe_core::embedding::LayerId;

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_cache(&dir.path().join("none.mpec"), "ingest").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("morphprobe ingest"));
    }

    #[test]
    fn corpus_jsonl_roundtrip() {
        let corpus = Corpus::new(
            "es",
            Split::Dev,
            vec![Sentence {
                source_id: "s1".into(),
                tokens: vec![Token::word("Ellos", "PRON", &[("Number", "Plur")]), Token::word(".", "PUNCT", &[])],
            }],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c/es.dev.jsonl");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn cache_and_manifest_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mpec");
        let cache = EmbeddingCache::from_parts(LayerId::new(2).unwrap(), 2, vec![2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let manifest = CacheManifest::describe(&cache, "x.conllu", "xx", "test");
        write_cache(&path, &cache, &manifest).unwrap();
        let (back, m) = read_cache_with_manifest(&path, "ingest").unwrap();
        assert_eq!((back, m), (cache, manifest));
        // no temporary files left behind
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }
}
