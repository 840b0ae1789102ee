//! Grounding samples, on-disk formats and the synthetic planted-event
//! benchmark.
//!
//! A dataset is a JSON Lines annotation file whose records point at binary
//! feature files (EATF). Time is stored in seconds on disk and converted to
//! normalized spans on load.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{io_err, Error, Result};
use crate::geometry::MomentSpan;
use crate::tensor::Matrix;

/// Magic bytes opening every feature file.
pub const EATF_MAGIC: &[u8; 4] = b"EATF";
/// Annotation file name inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Per-token features with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    tokens: Matrix<f32>,
    mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(tokens: Matrix<f32>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != tokens.rows() {
            return Err(Error::Config(format!(
                "mask length {} does not match {} tokens",
                mask.len(),
                tokens.rows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("feature sequence has no valid token".into()));
        }
        Ok(Self { tokens, mask })
    }

    /// A sequence whose tokens are all valid.
    pub fn dense(tokens: Matrix<f32>) -> Result<Self> {
        let mask = vec![true; tokens.rows()];
        Self::new(tokens, mask)
    }

    pub fn tokens(&self) -> &Matrix<f32> {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The valid rows only.
    pub fn valid_tokens(&self) -> Matrix<f32> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i]).collect();
        self.tokens.select_rows(&idx)
    }

    /// Appends `extra` masked rows of `value`.
    pub fn padded(&self, extra: usize, value: f32) -> Self {
        let mut data = self.tokens.data().to_vec();
        data.extend(std::iter::repeat_n(value, extra * self.dim()));
        let mut mask = self.mask.clone();
        mask.extend(std::iter::repeat_n(false, extra));
        Self {
            tokens: Matrix::from_vec(self.len() + extra, self.dim(), data),
            mask,
        }
    }
}

/// Ground truth of a synthetic sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvents {
    pub event_starts: Vec<usize>,
    pub prototype_ids: Vec<usize>,
    pub target_event: usize,
}

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub qid: u64,
    pub vid: String,
    pub duration: f64,
    pub video: FeatureSequence,
    pub sentence: FeatureSequence,
    pub gt_moments: Vec<MomentSpan>,
    pub meta: Option<PlantedEvents>,
}

// ---------------------------------------------------------------------------
// EATF feature files

pub fn encode_feature_matrix(matrix: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * matrix.len());
    out.extend_from_slice(EATF_MAGIC);
    out.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one EATF blob from the front of `bytes`, returning the matrix and
/// the number of bytes consumed.
pub fn decode_feature_matrix(bytes: &[u8], path: &Path) -> Result<(Matrix<f32>, usize)> {
    if bytes.len() < 12 || &bytes[..4] != EATF_MAGIC {
        if bytes.len() >= 4 && &bytes[..4] != EATF_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        return Err(Error::Length {
            path: path.into(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows * cols * 4;
    let payload = &bytes[12..];
    if payload.len() < expected {
        return Err(Error::Length {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Matrix::from_vec(rows, cols, data), 12 + expected))
}

pub fn write_feature_matrix(path: impl AsRef<Path>, matrix: &Matrix<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_matrix(matrix)).map_err(io_err(path))
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let (matrix, used) = decode_feature_matrix(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Length {
            path: path.into(),
            expected: used - 12,
            found: bytes.len() - 12,
        });
    }
    Ok(matrix)
}

// ---------------------------------------------------------------------------
// JSON Lines annotations

/// On-disk annotation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub qid: u64,
    pub vid: String,
    pub duration: f64,
    pub relevant_windows: Vec<[f64; 2]>,
    pub video_feature_ref: String,
    pub sentence_feature_ref: String,
    pub meta: Option<Value>,
}

impl Record {
    /// Parses one JSONL line, naming the offending field on failure.
    pub fn parse(line: &str, path: &Path, line_no: usize) -> Result<Self> {
        let schema = |field: &str, message: String| Error::Schema {
            path: path.into(),
            line: line_no,
            field: field.into(),
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| schema("<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema("<record>", "expected a JSON object".into()))?;
        let field = |name: &str| obj.get(name).ok_or_else(|| schema(name, "missing".into()));

        let qid = field("qid")?
            .as_u64()
            .ok_or_else(|| schema("qid", "expected a nonnegative integer".into()))?;
        let vid = field("vid")?
            .as_str()
            .ok_or_else(|| schema("vid", "expected a string".into()))?
            .to_string();
        let duration = field("duration")?
            .as_f64()
            .filter(|d| *d > 0.0 && d.is_finite())
            .ok_or_else(|| schema("duration", "expected a positive number".into()))?;
        let windows = field("relevant_windows")?
            .as_array()
            .ok_or_else(|| schema("relevant_windows", "expected an array".into()))?;
        let mut relevant_windows = Vec::with_capacity(windows.len());
        for w in windows {
            let pair = w
                .as_array()
                .filter(|p| p.len() == 2)
                .and_then(|p| Some([p[0].as_f64()?, p[1].as_f64()?]))
                .ok_or_else(|| schema("relevant_windows", format!("expected [start, end], got {w}")))?;
            relevant_windows.push(pair);
        }
        if relevant_windows.is_empty() {
            return Err(schema("relevant_windows", "at least one window required".into()));
        }
        let text = |name: &str| -> Result<String> {
            Ok(field(name)?
                .as_str()
                .ok_or_else(|| schema(name, "expected a string".into()))?
                .to_string())
        };
        let video_feature_ref = text("video_feature_ref")?;
        let sentence_feature_ref = text("sentence_feature_ref")?;
        let meta = obj.get("meta").filter(|m| !m.is_null()).cloned();
        Ok(Self {
            qid,
            vid,
            duration,
            relevant_windows,
            video_feature_ref,
            sentence_feature_ref,
            meta,
        })
    }

    /// Normalized ground-truth spans.
    pub fn gt_spans(&self) -> Result<Vec<MomentSpan>> {
        self.relevant_windows
            .iter()
            .map(|&[s, e]| {
                let (s, e) = (s / self.duration, e / self.duration);
                if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) || e <= s {
                    return Err(Error::Validation {
                        vid: self.vid.clone(),
                        message: format!("window [{s}, {e}] (normalized) outside [0, 1] or empty"),
                    });
                }
                MomentSpan::from_interval(s, e).map_err(|err| Error::Validation {
                    vid: self.vid.clone(),
                    message: err.to_string(),
                })
            })
            .collect()
    }

    /// Loads the referenced features, resolving relative paths against `base`.
    pub fn into_sample(self, base: &Path) -> Result<GroundingSample> {
        let load = |reference: &str| -> Result<FeatureSequence> {
            let path = base.join(reference);
            if !path.is_file() {
                return Err(Error::MissingFeature {
                    vid: self.vid.clone(),
                    path,
                });
            }
            let matrix = read_feature_matrix(&path)?;
            FeatureSequence::dense(matrix).map_err(|e| Error::Validation {
                vid: self.vid.clone(),
                message: e.to_string(),
            })
        };
        let video = load(&self.video_feature_ref)?;
        let sentence = load(&self.sentence_feature_ref)?;
        let gt_moments = self.gt_spans()?;
        let meta = match &self.meta {
            Some(v) => serde_json::from_value::<PlantedEvents>(v.clone()).ok(),
            None => None,
        };
        Ok(GroundingSample {
            qid: self.qid,
            vid: self.vid,
            duration: self.duration,
            video,
            sentence,
            gt_moments,
            meta,
        })
    }
}

/// Resolves a dataset path: either an annotation file or a directory holding
/// [`ANNOTATIONS_FILE`].
pub fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Lazily parses samples from an annotation file.
pub struct DatasetReader {
    path: PathBuf,
    base: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<GroundingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(Record::parse(&line, &self.path, self.line_no).and_then(|r| r.into_sample(&self.base)));
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let path = annotation_path(path.as_ref());
    let file = File::open(&path).map_err(io_err(&path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetReader {
        path,
        base,
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

/// Loads every sample eagerly.
pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<GroundingSample>> {
    load_dataset(path)?.collect()
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Parameters of the planted-event generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub video_len: usize,
    pub sentence_len: usize,
    pub feature_dim: usize,
    /// Inclusive range of planted events per video.
    pub num_events: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
    /// Index of the first generated sample; distinct splits use disjoint ranges.
    pub start_index: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            video_len: 50,
            sentence_len: 6,
            feature_dim: 64,
            num_events: (2, 5),
            noise_sigma: 0.05,
            seed: 0,
            start_index: 0,
        }
    }
}

/// Shortest planted block; shorter blocks fall inside the kernel half-width.
pub const MIN_BLOCK_LEN: usize = 3;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.num_events;
        if self.video_len < 8 {
            return Err(Error::Config(format!(
                "video_len {} must be at least 8",
                self.video_len
            )));
        }
        if lo < 2 || hi < lo || hi > self.video_len / 4 {
            return Err(Error::Config(format!(
                "num_events range [{lo}, {hi}] must lie within [2, video_len/4 = {}]",
                self.video_len / 4
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.sentence_len == 0 || self.feature_dim == 0 {
            return Err(Error::Config("sentence_len and feature_dim must be positive".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

fn split_blocks(rng: &mut ChaCha8Rng, len: usize, blocks: usize) -> Vec<usize> {
    let slack = len - MIN_BLOCK_LEN * blocks;
    let mut cuts: Vec<usize> = (0..blocks - 1).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    std::iter::once(0)
        .chain(cuts)
        .enumerate()
        .map(|(i, c)| c + i * MIN_BLOCK_LEN)
        .collect()
}

/// Generates sample `index` of the synthetic benchmark.
pub fn synthesize_sample(config: &SyntheticConfig, index: u64) -> GroundingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (lo, hi) = config.num_events;
    let events = rng.random_range(lo..=hi);
    let starts = split_blocks(&mut rng, config.video_len, events);
    let protos: Vec<Vec<f32>> = (0..events).map(|_| unit_vector(&mut rng, config.feature_dim)).collect();
    let target = rng.random_range(0..events);
    let noise = Normal::new(0.0f64, config.noise_sigma.max(0.0)).unwrap();
    let noisy = |proto: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
        proto
            .iter()
            .map(|&p| {
                if config.noise_sigma > 0.0 {
                    p + noise.sample(rng) as f32
                } else {
                    p
                }
            })
            .collect()
    };

    let mut video = Vec::with_capacity(config.video_len * config.feature_dim);
    let mut block = 0;
    for frame in 0..config.video_len {
        while block + 1 < events && frame >= starts[block + 1] {
            block += 1;
        }
        video.extend(noisy(&protos[block], &mut rng));
    }
    let mut sentence = Vec::with_capacity(config.sentence_len * config.feature_dim);
    for _ in 0..config.sentence_len {
        sentence.extend(noisy(&protos[target], &mut rng));
    }

    let len = config.video_len as f64;
    let end = if target + 1 < events {
        starts[target + 1]
    } else {
        config.video_len
    };
    let gt =
        MomentSpan::from_interval(starts[target] as f64 / len, end as f64 / len).expect("planted block is non-empty");
    let qid = config.start_index + index;
    GroundingSample {
        qid,
        vid: format!("syn{qid:06}"),
        duration: len,
        video: FeatureSequence::dense(Matrix::from_vec(config.video_len, config.feature_dim, video))
            .expect("non-empty"),
        sentence: FeatureSequence::dense(Matrix::from_vec(config.sentence_len, config.feature_dim, sentence))
            .expect("non-empty"),
        gt_moments: vec![gt],
        meta: Some(PlantedEvents {
            event_starts: starts,
            prototype_ids: (0..events).collect(),
            target_event: target,
        }),
    }
}

/// Generates the benchmark in memory.
pub fn synthesize(config: &SyntheticConfig) -> Result<Vec<GroundingSample>> {
    config.validate()?;
    Ok((0..config.num_samples as u64)
        .into_par_iter()
        .map(|i| synthesize_sample(config, i))
        .collect())
}

/// Files written by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub annotations: PathBuf,
    pub feature_files: Vec<PathBuf>,
}

/// Writes `samples` as a dataset directory: annotations plus feature files.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[GroundingSample]) -> Result<GeneratedDataset> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(io_err(&features))?;
    let annotations = dir.join(ANNOTATIONS_FILE);
    let file = File::create(&annotations).map_err(io_err(&annotations))?;
    let mut out = BufWriter::new(file);
    let mut feature_files = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let video_ref = format!("features/{}.video.eatf", s.vid);
        let sentence_ref = format!("features/{}.sentence.eatf", s.vid);
        write_feature_matrix(dir.join(&video_ref), &s.video.valid_tokens())?;
        write_feature_matrix(dir.join(&sentence_ref), &s.sentence.valid_tokens())?;
        feature_files.push(dir.join(&video_ref));
        feature_files.push(dir.join(&sentence_ref));
        let windows: Vec<[f64; 2]> = s
            .gt_moments
            .iter()
            .map(|m| {
                let (a, b) = m.interval();
                [a * s.duration, b * s.duration]
            })
            .collect();
        let record = json!({
            "qid": s.qid,
            "vid": s.vid,
            "duration": s.duration,
            "relevant_windows": windows,
            "video_feature_ref": video_ref,
            "sentence_feature_ref": sentence_ref,
            "meta": s.meta,
        });
        writeln!(out, "{record}").map_err(io_err(&annotations))?;
    }
    out.flush().map_err(io_err(&annotations))?;
    Ok(GeneratedDataset {
        annotations,
        feature_files,
    })
}

/// Generates the synthetic benchmark and writes it under `dir`.
pub fn generate_synthetic(config: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<GeneratedDataset> {
    let samples = synthesize(config)?;
    write_dataset(dir, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = Matrix::<f32>::from_fn(12, 8, |r, c| (r * 8 + c) as f32 * 0.5);
        let bytes = encode_feature_matrix(&m);
        assert_eq!(&bytes[..4], b"EATF");
        assert_eq!(&bytes[4..8], &12u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &8u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 12 * 8 * 4);
        assert_eq!(&bytes[12..16], &0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::<f32>::from_fn(3, 2, |r, c| (r + c) as f32);
        let mut bytes = encode_feature_matrix(&m);

        let bad = dir.path().join("bad.eatf");
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&bad, &wrong).unwrap();
        assert!(matches!(read_feature_matrix(&bad), Err(Error::BadMagic { .. })));

        let short = dir.path().join("short.eatf");
        bytes.truncate(bytes.len() - 3);
        fs::write(&short, &bytes).unwrap();
        assert!(matches!(read_feature_matrix(&short), Err(Error::Length { .. })));

        let long = dir.path().join("long.eatf");
        let mut extra = encode_feature_matrix(&m);
        extra.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&long, &extra).unwrap();
        assert!(matches!(read_feature_matrix(&long), Err(Error::Length { .. })));
    }

    #[test]
    fn seconds_to_normalized() {
        let line = r#"{"qid": 1, "vid": "v", "duration": 60, "relevant_windows": [[15, 30]], "video_feature_ref": "a", "sentence_feature_ref": "b", "meta": null}"#;
        let r = Record::parse(line, Path::new("x.jsonl"), 1).unwrap();
        let spans = r.gt_spans().unwrap();
        assert!((spans[0].center() - 0.375).abs() < 1e-12);
        assert!((spans[0].width() - 0.25).abs() < 1e-12);

        let out_of_range = r#"{"qid": 1, "vid": "v", "duration": 10, "relevant_windows": [[5, 30]],
            "video_feature_ref": "a", "sentence_feature_ref": "b"}"#;
        let r = Record::parse(out_of_range, Path::new("x.jsonl"), 1).unwrap();
        assert!(matches!(r.gt_spans(), Err(Error::Validation { .. })));
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let line = r#"{"qid": 1, "vid": 3, "duration": 60, "relevant_windows": [[15, 30]], "video_feature_ref": "a", "sentence_feature_ref": "b"}"#;
        let err = Record::parse(line, Path::new("d.jsonl"), 7).unwrap_err();
        match err {
            Error::Schema { line, field, .. } => assert_eq!((line, field.as_str()), (7, "vid")),
            other => panic!("{other}"),
        }
        let err = Record::parse(r#"{"qid": 1}"#, Path::new("d.jsonl"), 2).unwrap_err();
        assert!(err.to_string().contains("d.jsonl:2"));
    }

    #[test]
    fn block_splits_respect_minimum_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let blocks = rng.random_range(2..=12);
            let starts = split_blocks(&mut rng, 50, blocks);
            assert_eq!(starts[0], 0);
            let mut ends = starts[1..].to_vec();
            ends.push(50);
            assert!(starts.iter().zip(&ends).all(|(s, e)| e - s >= MIN_BLOCK_LEN));
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let config = SyntheticConfig {
            num_samples: 10,
            seed: 11,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let gen = generate_synthetic(&config, a.path()).unwrap();
        generate_synthetic(&config, b.path()).unwrap();
        assert_eq!(gen.feature_files.len(), 20);
        let text = fs::read_to_string(&gen.annotations).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert_eq!(text, fs::read_to_string(b.path().join(ANNOTATIONS_FILE)).unwrap());
        for f in &gen.feature_files {
            let name = f.file_name().unwrap();
            assert_eq!(
                fs::read(f).unwrap(),
                fs::read(b.path().join("features").join(name)).unwrap()
            );
        }

        let original = synthesize(&config).unwrap();
        let loaded = load_all(a.path()).unwrap();
        assert_eq!(loaded.len(), original.len());
        for (l, o) in loaded.iter().zip(&original) {
            assert_eq!(l.vid, o.vid);
            assert_eq!(l.video, o.video);
            assert_eq!(l.meta, o.meta);
            for (x, y) in l.gt_moments.iter().zip(&o.gt_moments) {
                assert!((x.center() - y.center()).abs() < 1e-9);
                assert!((x.width() - y.width()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn missing_feature_names_vid() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"qid": 1, "vid": "clip42", "duration": 60, "relevant_windows": [[15, 30]], "video_feature_ref": "nope.eatf", "sentence_feature_ref": "b.eatf"}"#;
        fs::write(dir.path().join(ANNOTATIONS_FILE), line).unwrap();
        let err = load_all(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingFeature { ref vid, .. } if vid == "clip42"));
        assert!(err.to_string().contains("clip42"));
    }

    #[test]
    fn invalid_event_range_is_rejected() {
        let config = SyntheticConfig {
            num_events: (1, 3),
            ..Default::default()
        };
        assert!(config.validate().is_err());
        let config = SyntheticConfig {
            num_events: (2, 13),
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }
}
