//! Frame ingestion, fixed-length windows, and sequence-level splits.
//!
//! Windows never cross a gap in frame indices, and train/test
//! partitioning happens at whole-sequence granularity before any window
//! is cut, so no overlapping window can leak across the split.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::simulator::dataset::{config_hash, frame_from_line, DatasetHeader};
use crate::simulator::scene::Frame;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

/// History/horizon layout of one training window.
///
/// The window spans `T = t_hist + t_pred` consecutive frames, mapped to
/// normalized time by `tau(i) = i / (T - 1)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub t_hist: usize,
    pub t_pred: usize,
    /// Anchor hop between consecutive windows.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig::variant_a()
    }
}

impl WindowConfig {
    /// 8 history frames, 5 prediction frames.
    pub fn variant_a() -> Self {
        WindowConfig {
            t_hist: 8,
            t_pred: 5,
            stride: 1,
        }
    }

    /// 3 history frames, 10 prediction frames.
    pub fn variant_b() -> Self {
        WindowConfig {
            t_hist: 3,
            t_pred: 10,
            stride: 1,
        }
    }

    pub fn total(&self) -> usize {
        self.t_hist + self.t_pred
    }

    pub fn delta_tau(&self) -> f64 {
        1.0 / (self.total() - 1) as f64
    }

    /// Normalized time of window position `i`, computed directly from the
    /// index so the grid cannot drift.
    pub fn tau(&self, i: usize) -> f64 {
        i as f64 / (self.total() - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_hist == 0 || self.t_pred == 0 {
            return Err(Error::config(format!(
                "window needs t_hist >= 1 and t_pred >= 1 (got {}/{})",
                self.t_hist, self.t_pred
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("window stride must be >= 1"));
        }
        Ok(())
    }
}

/// One supervised sample: the bounding-box history and the beam labels
/// of every frame in the window (history and prediction).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub seq_id: String,
    /// Frame index of the first prediction step.
    pub anchor: usize,
    /// t_hist x 4 history boxes.
    pub x: Tensor,
    /// Length-T labels; `labels[t_hist + j]` is the truth for prediction step j.
    pub labels: Vec<usize>,
}

/// All frames of one capture sequence, sorted by frame index.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub seq_id: String,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Maximal runs of consecutive frame indices, as ranges into `frames`.
    fn contiguous_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..self.frames.len() {
            if self.frames[i].frame_idx != self.frames[i - 1].frame_idx + 1 {
                runs.push(start..i);
                start = i;
            }
        }
        if !self.frames.is_empty() {
            runs.push(start..self.frames.len());
        }
        runs
    }

    pub fn is_contiguous(&self) -> bool {
        self.contiguous_runs().len() <= 1
    }
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub header: DatasetHeader,
    pub sequences: Vec<Sequence>,
    /// Per-sequence notes, e.g. non-contiguous frame indices.
    pub warnings: Vec<String>,
}

impl LoadedDataset {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Subtract this base from beam indices on ingestion (1 for 1-based exports).
    pub beam_base: usize,
}

pub fn load_frames(path: &Path) -> Result<LoadedDataset> {
    load_frames_with(path, LoadOptions::default())
}

/// Read a dataset file: parse the header, group records by `seq_id`,
/// sort each group by frame index, and reject duplicates.
pub fn load_frames_with(path: &Path, opts: LoadOptions) -> Result<LoadedDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut header: Option<DatasetHeader> = None;
    let mut groups: BTreeMap<String, Vec<(usize, Frame)>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if lineno == 1 {
            header = Some(DatasetHeader::parse(&line)?);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut frame = frame_from_line(&line, lineno)?;
        if frame.beam < opts.beam_base {
            return Err(Error::data(format!(
                "line {lineno}: beam {} below index base {}",
                frame.beam, opts.beam_base
            )));
        }
        frame.beam -= opts.beam_base;
        groups
            .entry(frame.seq_id.clone())
            .or_default()
            .push((lineno, frame));
    }
    let header = header.ok_or_else(|| Error::data("empty dataset file"))?;

    let mut sequences = Vec::with_capacity(groups.len());
    let mut warnings = Vec::new();
    for (seq_id, mut entries) in groups {
        entries.sort_by_key(|(_, f)| f.frame_idx);
        for pair in entries.windows(2) {
            if pair[0].1.frame_idx == pair[1].1.frame_idx {
                return Err(Error::data(format!(
                    "line {}: duplicate frame {} in sequence {}",
                    pair[1].0, pair[1].1.frame_idx, seq_id
                )));
            }
        }
        for (lineno, f) in &entries {
            if f.beam >= header.codebook_size {
                return Err(Error::data(format!(
                    "line {lineno}: beam {} outside codebook of size {}",
                    f.beam, header.codebook_size
                )));
            }
            if f.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data(format!(
                    "line {lineno}: bbox component outside [0, 1]"
                )));
            }
        }
        let seq = Sequence {
            seq_id: seq_id.clone(),
            frames: entries.into_iter().map(|(_, f)| f).collect(),
        };
        if !seq.is_contiguous() {
            warnings.push(format!(
                "sequence {seq_id}: non-contiguous frame indices ({} runs)",
                seq.contiguous_runs().len()
            ));
        }
        sequences.push(seq);
    }
    Ok(LoadedDataset {
        header,
        sequences,
        warnings,
    })
}

/// Cut every valid window out of one sequence. Sequences (or contiguous
/// runs) shorter than the window yield nothing, which is not an error.
pub fn make_windows(seq: &Sequence, cfg: &WindowConfig) -> Vec<WindowSample> {
    let t = cfg.total();
    let mut out = Vec::new();
    for run in seq.contiguous_runs() {
        let frames = &seq.frames[run];
        if frames.len() < t {
            continue;
        }
        let mut start = 0;
        while start + t <= frames.len() {
            let window = &frames[start..start + t];
            let mut x = Tensor::zeros(cfg.t_hist, 4);
            for (r, f) in window[..cfg.t_hist].iter().enumerate() {
                x.row_mut(r).copy_from_slice(&f.bbox);
            }
            out.push(WindowSample {
                seq_id: seq.seq_id.clone(),
                anchor: window[cfg.t_hist].frame_idx,
                x,
                labels: window.iter().map(|f| f.beam).collect(),
            });
            start += cfg.stride;
        }
    }
    out
}

/// Train/test windows plus the sequence ids each side came from.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub train_seq_ids: BTreeSet<String>,
    pub test_seq_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn leakage_free(&self) -> bool {
        self.train_seq_ids.is_disjoint(&self.test_seq_ids)
    }
}

/// Partition whole sequences into train/test, then window each side.
pub fn split_sequences(
    seqs: &[Sequence],
    cfg: &WindowConfig,
    test_fraction: f64,
    rng: &mut Rng,
) -> Result<DatasetSplit> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::config(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    if seqs.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 sequences to split, got {}",
            seqs.len()
        )));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    rng.shuffle(&mut order);
    let n_test = ((seqs.len() as f64 * test_fraction).round() as usize).clamp(1, seqs.len() - 1);
    let test_idx: BTreeSet<usize> = order[..n_test].iter().copied().collect();

    let test_ids = test_idx.iter().map(|&i| seqs[i].seq_id.clone()).collect();
    let train_ids = (0..seqs.len())
        .filter(|i| !test_idx.contains(i))
        .map(|i| seqs[i].seq_id.clone())
        .collect();
    Ok(build_split(seqs, cfg, train_ids, test_ids))
}

fn build_split(
    seqs: &[Sequence],
    cfg: &WindowConfig,
    train_seq_ids: BTreeSet<String>,
    test_seq_ids: BTreeSet<String>,
) -> DatasetSplit {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for seq in seqs {
        let windows = make_windows(seq, cfg);
        if test_seq_ids.contains(&seq.seq_id) {
            test.extend(windows);
        } else if train_seq_ids.contains(&seq.seq_id) {
            train.extend(windows);
        }
    }
    DatasetSplit {
        train,
        test,
        train_seq_ids,
        test_seq_ids,
    }
}

/// On-disk record of a split, for frozen comparisons across models.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub train_seq_ids: Vec<String>,
    pub test_seq_ids: Vec<String>,
    pub fingerprint: String,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit, seed: u64, test_fraction: f64) -> Self {
        let train_seq_ids: Vec<String> = split.train_seq_ids.iter().cloned().collect();
        let test_seq_ids: Vec<String> = split.test_seq_ids.iter().cloned().collect();
        let fingerprint = config_hash(&(&train_seq_ids, &test_seq_ids, seed));
        SplitManifest {
            seed,
            test_fraction,
            train_seq_ids,
            test_seq_ids,
            fingerprint,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| Error::data(format!("manifest parse: {e}")))
    }

    /// Rebuild the exact split this manifest records.
    pub fn apply(&self, seqs: &[Sequence], cfg: &WindowConfig) -> Result<DatasetSplit> {
        let known: BTreeSet<&str> = seqs.iter().map(|s| s.seq_id.as_str()).collect();
        for id in self.train_seq_ids.iter().chain(&self.test_seq_ids) {
            if !known.contains(id.as_str()) {
                return Err(Error::data(format!(
                    "manifest names sequence {id} missing from the dataset"
                )));
            }
        }
        Ok(build_split(
            seqs,
            cfg,
            self.train_seq_ids.iter().cloned().collect(),
            self.test_seq_ids.iter().cloned().collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_sequence(seq_id: &str, len: usize) -> Sequence {
        Sequence {
            seq_id: seq_id.to_string(),
            frames: (0..len)
                .map(|i| Frame {
                    seq_id: seq_id.to_string(),
                    frame_idx: i,
                    bbox: [i as f64 / len as f64, 0.5, 0.1, 0.1],
                    beam: i % 32,
                })
                .collect(),
        }
    }

    #[test]
    fn tau_grid_is_exact() {
        let cfg = WindowConfig::variant_a();
        assert_eq!(cfg.total(), 13);
        assert_eq!(cfg.tau(0), 0.0);
        assert_eq!(cfg.tau(12), 1.0);
        for i in 0..13 {
            assert_eq!(cfg.tau(i), i as f64 / 12.0);
        }
        assert_eq!(WindowConfig::variant_b().total(), 13);
    }

    #[test]
    fn window_counts() {
        let cfg = WindowConfig::variant_a();
        assert_eq!(make_windows(&synthetic_sequence("s", 13), &cfg).len(), 1);
        assert_eq!(make_windows(&synthetic_sequence("s", 20), &cfg).len(), 8);
        assert_eq!(make_windows(&synthetic_sequence("s", 12), &cfg).len(), 0);

        let strided = WindowConfig {
            stride: 3,
            ..WindowConfig::variant_a()
        };
        assert_eq!(make_windows(&synthetic_sequence("s", 20), &strided).len(), 3);
    }

    #[test]
    fn window_shapes_per_variant() {
        let seq = synthetic_sequence("s", 13);
        let a = &make_windows(&seq, &WindowConfig::variant_a())[0];
        assert_eq!(a.x.shape().dims(), [8, 4]);
        assert_eq!(a.labels.len(), 13);
        let b = &make_windows(&seq, &WindowConfig::variant_b())[0];
        assert_eq!(b.x.shape().dims(), [3, 4]);
        assert_eq!(b.labels.len(), 13);
    }

    #[test]
    fn label_alignment() {
        let seq = synthetic_sequence("s", 30);
        let cfg = WindowConfig::variant_a();
        for w in make_windows(&seq, &cfg) {
            for j in 0..cfg.t_pred {
                // the synthetic labels equal the frame index mod 32
                assert_eq!(w.labels[cfg.t_hist + j], (w.anchor + j) % 32);
            }
        }
    }

    #[test]
    fn windows_never_cross_gaps() {
        let mut seq = synthetic_sequence("s", 30);
        seq.frames.remove(15);
        assert!(!seq.is_contiguous());
        let cfg = WindowConfig::variant_a();
        for w in make_windows(&seq, &cfg) {
            // anchor - t_hist is the first frame; all 13 must be consecutive
            let first = w.anchor - cfg.t_hist;
            assert!(
                first + cfg.total() <= 15 || first >= 16,
                "window spans the gap"
            );
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let seqs: Vec<Sequence> = (0..10)
            .map(|i| synthetic_sequence(&format!("s{i:02}"), 20))
            .collect();
        let cfg = WindowConfig::variant_a();
        let a = split_sequences(&seqs, &cfg, 0.2, &mut Rng::new(3)).unwrap();
        assert_eq!(a.test_seq_ids.len(), 2);
        assert_eq!(a.train_seq_ids.len(), 8);
        assert!(a.leakage_free());
        assert_eq!(a.train.len(), 8 * 8);
        assert_eq!(a.test.len(), 2 * 8);

        let b = split_sequences(&seqs, &cfg, 0.2, &mut Rng::new(3)).unwrap();
        assert_eq!(a.test_seq_ids, b.test_seq_ids);

        // windows from one sequence never appear on both sides
        for w in &a.test {
            assert!(!a.train.iter().any(|t| t.seq_id == w.seq_id));
        }
    }

    #[test]
    fn split_needs_both_sides() {
        let seqs = vec![synthetic_sequence("only", 20)];
        let cfg = WindowConfig::variant_a();
        assert!(split_sequences(&seqs, &cfg, 0.2, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn manifest_round_trip_rebuilds_the_split() {
        let dir = tempfile::tempdir().unwrap();
        let seqs: Vec<Sequence> = (0..6)
            .map(|i| synthetic_sequence(&format!("s{i}"), 15))
            .collect();
        let cfg = WindowConfig::variant_a();
        let split = split_sequences(&seqs, &cfg, 0.3, &mut Rng::new(1)).unwrap();
        let manifest = SplitManifest::from_split(&split, 1, 0.3);
        let path = dir.path().join("split.json");
        manifest.save(&path).unwrap();
        let loaded = SplitManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
        let rebuilt = loaded.apply(&seqs, &cfg).unwrap();
        assert_eq!(rebuilt.test_seq_ids, split.test_seq_ids);
        assert_eq!(rebuilt.train.len(), split.train.len());
    }

    #[test]
    fn loader_round_trips_generated_files() {
        use crate::simulator::dataset::{generate_dataset, SimConfig};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ds");
        let cfg = SimConfig {
            sequences: 4,
            ..SimConfig::default()
        };
        let summary = generate_dataset(&cfg, &Rng::new(8), &path).unwrap();
        let loaded = load_frames(&path).unwrap();
        assert_eq!(loaded.sequences.len(), 4);
        assert_eq!(loaded.total_frames(), summary.frames);
        assert_eq!(loaded.header, summary.header);
        assert!(loaded.warnings.is_empty());

        // shuffling the record lines must not change the grouping
        let raw = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = raw.lines().collect();
        let body = &mut lines[1..];
        body.reverse();
        let shuffled = dir.path().join("shuffled.ds");
        std::fs::write(&shuffled, lines.join("\n")).unwrap();
        let reloaded = load_frames(&shuffled).unwrap();
        for (a, b) in loaded.sequences.iter().zip(&reloaded.sequences) {
            assert_eq!(a.seq_id, b.seq_id);
            assert_eq!(a.frames, b.frames);
        }
    }

    #[test]
    fn duplicate_frame_is_an_error_naming_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.ds");
        let content = "\
# beamflow-dataset v1 m=32 fps=7 config=abc
s0,0,0.1,0.1,0.1,0.1,3
s0,1,0.2,0.1,0.1,0.1,4
s0,1,0.3,0.1,0.1,0.1,5
";
        std::fs::write(&path, content).unwrap();
        let err = load_frames(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate frame"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn beam_base_offset_applies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one_based.ds");
        let content = "\
# beamflow-dataset v1 m=8 fps=7 config=abc
s0,0,0.1,0.1,0.1,0.1,1
s0,1,0.2,0.1,0.1,0.1,8
";
        std::fs::write(&path, content).unwrap();
        let loaded = load_frames_with(&path, LoadOptions { beam_base: 1 }).unwrap();
        assert_eq!(loaded.sequences[0].frames[0].beam, 0);
        assert_eq!(loaded.sequences[0].frames[1].beam, 7);
        // without the base, beam 8 is out of range for m=8
        assert!(load_frames(&path).is_err());
    }
}
