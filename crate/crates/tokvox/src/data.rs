//! Utterance manifests and the synthetic corpus writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokvox_core::codec::distill::TeacherEmbeddings;
use tokvox_core::codec::train::Clip;
use tokvox_core::lm::{ByteTokenizer, Tokenizer};
use tokvox_core::synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::formats::{read_teacher, write_teacher};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub wav: PathBuf,
    pub text: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub wave: Vec<f32>,
    pub text: Vec<usize>,
    pub teacher: Option<TeacherEmbeddings<f32>>,
}

impl Utterance {
    pub fn clip(&self) -> Clip<f32> {
        Clip { wave: self.wave.clone(), teacher: self.teacher.clone() }
    }
}

/// Teacher frames expected for `samples` at the two rates, to the nearest frame.
pub fn expected_teacher_frames(samples: usize, sample_rate: u32, teacher_rate: f64) -> usize {
    (samples as f64 / sample_rate as f64 * teacher_rate).round() as usize
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let s = fs::read_to_string(path).map_err(Error::io(path))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(Error::io(path))
}

/// Reads every record's audio and teacher, checking their lengths agree within one frame.
pub fn load_utterances(manifest: &Path, sample_rate: u32) -> Result<Vec<Utterance>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::format(manifest, "manifest has no utterances"));
    }
    records
        .into_iter()
        .map(|r| {
            let wav = dir.join(&r.wav);
            let wave = read_wav(&wav, sample_rate)?;
            let teacher = match &r.teacher {
                Some(t) => {
                    let path = dir.join(t);
                    let te = read_teacher(&path)?;
                    let want = expected_teacher_frames(wave.len(), sample_rate, te.frame_rate);
                    if te.len().abs_diff(want) > 1 {
                        return Err(Error::format(
                            path,
                            format!("{} teacher frames but {} expected for {}", te.len(), want, wav.display()),
                        ));
                    }
                    Some(te)
                }
                None => None,
            };
            Ok(Utterance { wave, text: r.text, teacher })
        })
        .collect()
}

/// Writes the synthetic corpus (WAV + S3TE per utterance) and its manifest
/// into `dir`; returns the manifest path.
pub fn make_data(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let tok = ByteTokenizer;
    let mut records = Vec::new();
    for (i, u) in synth_dataset(spec)?.iter().enumerate() {
        let wav = PathBuf::from(format!("utt{i:04}.wav"));
        let teacher = PathBuf::from(format!("utt{i:04}.s3te"));
        write_wav(&dir.join(&wav), &u.wave, spec.sample_rate)?;
        write_teacher(&dir.join(&teacher), &u.teacher)?;
        records.push(UtteranceRecord { wav, text: tok.encode(&u.transcript), teacher: Some(teacher) });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn corpus_is_byte_identical_across_runs() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SynthSpec { count: 4, seed: 7, ..Default::default() };
        make_data(a.path(), &spec).unwrap();
        make_data(b.path(), &spec).unwrap();
        let ta = tree(a.path());
        assert_eq!(ta.len(), 9);
        assert_eq!(ta, tree(b.path()));
    }

    #[test]
    fn loaded_corpus_is_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let m = make_data(dir.path(), &spec).unwrap();
        let utts = load_utterances(&m, spec.sample_rate).unwrap();
        assert_eq!(utts.len(), spec.count);
        for u in &utts {
            assert_eq!(u.wave.len() % 8, 0);
            let te = u.teacher.as_ref().unwrap();
            // 50 Hz analog: four teacher frames per codec frame
            assert_eq!(te.len(), u.wave.len() / 8 * 4);
            assert!(!u.text.is_empty());
        }
    }

    #[test]
    fn teacher_length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_data(dir.path(), &SynthSpec { count: 1, ..Default::default() }).unwrap();
        let mut recs = read_manifest(&m).unwrap();
        let short: Vec<f32> = vec![0.0; 64];
        write_wav(&dir.path().join("short.wav"), &short, 16000).unwrap();
        recs[0].wav = "short.wav".into();
        write_manifest(&m, &recs).unwrap();
        assert!(load_utterances(&m, 16000).unwrap_err().to_string().contains("teacher frames"));
    }
}
