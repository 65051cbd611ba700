//! On-disk corpus: writer, loader and format validator.
//!
//! ```text
//! manifest.json
//! avg_flm.csv
//! samples/<id>/aups.csv
//! samples/<id>/flm.csv
//! samples/<id>/frames/00000.png …
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{face_landmarks, render_rgb8, RenderSpec, LANDMARK_COUNT};
use super::viseme::{sentence_to_aups, VisemeTable};
use crate::config::PipelineConfig;
use crate::domain::{
    average_landmarks, denormalize_aups, normalize_aups, AupsVector, FrameImage, LandmarkSet, SampleRecord,
    AUPS_DIM, AU_NAMES, POSE_NAMES,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AVG_FLM_FILE: &str = "avg_flm.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub text: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config: PipelineConfig,
    pub samples: Vec<ManifestSample>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

pub fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

/// Viseme table and renderer settings implied by a config.
pub fn oracle_for(cfg: &PipelineConfig) -> Result<(VisemeTable, RenderSpec)> {
    let table = VisemeTable::new(cfg.stream_seed("oracle.viseme"), cfg.oracle.frames_per_word)?;
    Ok((table, RenderSpec::new(cfg.image_h, cfg.image_w)))
}

/// Sentences file: one sentence per line, blank lines ignored.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if sentences.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no sentences", path.display())));
    }
    Ok(sentences)
}

/// Six fractional digits, never `-0.000000`.
pub fn fmt6(x: f64) -> String {
    let s = format!("{:.6}", x);
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn aups_header() -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend(AU_NAMES.iter().chain(POSE_NAMES.iter()).map(|s| s.to_string()));
    h
}

fn flm_columns() -> Vec<String> {
    (0..LANDMARK_COUNT).flat_map(|i| [format!("x{i}"), format!("y{i}")]).collect()
}

fn flm_header() -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    h.extend(flm_columns());
    h
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path.display(), line, format!("{other:?}")),
    }
}

/// Writes the AU+PS table of one sample in raw units.
pub fn write_aups_csv(path: &Path, seq: &[AupsVector]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(aups_header()).map_err(|e| csv_error(path, e))?;
    for (t, v) in seq.iter().enumerate() {
        let raw = if v.is_normalized() { denormalize_aups(v)? } else { *v };
        let mut row = vec![t.to_string()];
        row.extend(raw.to_array().iter().map(|&x| fmt6(x)));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes per-frame landmark rows (with a `frame` column) or, when
/// `frame_column` is false, plain coordinate rows.
fn write_flm_csv(path: &Path, sets: &[LandmarkSet], frame_column: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header = if frame_column { flm_header() } else { flm_columns() };
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (t, s) in sets.iter().enumerate() {
        let mut row = if frame_column { vec![t.to_string()] } else { Vec::new() };
        row.extend(s.flatten().iter().map(|&x| fmt6(x)));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, frame: &FrameImage) -> Result<()> {
    write_rgb8_png(path, frame.height(), frame.width(), frame.to_rgb8())
}

fn write_rgb8_png(path: &Path, h: usize, w: usize, rgb: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Shape(format!("rgb buffer does not match {h}x{w}")))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path.display(), 0, other.to_string()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ensure_empty_dir(path: &Path) -> Result<()> {
    if path.exists() {
        let mut entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        if entries.next().is_some() {
            return Err(Error::Data(format!("output directory {} is not empty", path.display())));
        }
    }
    create_dir(path)
}

/// Renders every sentence and writes the full corpus under `out_dir`,
/// which must be missing or empty.
pub fn generate_corpus(sentences: &[String], cfg: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("no sentences to render".into()));
    }
    cfg.validate()?;
    let (table, spec) = oracle_for(cfg)?;
    ensure_empty_dir(out_dir)?;
    let mut samples = Vec::with_capacity(sentences.len());
    let mut all_landmarks = Vec::new();
    for (i, text) in sentences.iter().enumerate() {
        let id = sample_id(i);
        let dir = out_dir.join("samples").join(&id);
        let frames_dir = dir.join("frames");
        create_dir(&frames_dir)?;
        let seq = sentence_to_aups(text, &table)?;
        // Round-trip through the raw six-decimal table so the frames and
        // landmarks match exactly what a loader reads back.
        let aups_path = dir.join("aups.csv");
        write_aups_csv(&aups_path, &seq)?;
        let seq = read_aups_csv(&aups_path, Some(seq.len()))?;
        let mut flm = Vec::with_capacity(seq.len());
        for (t, v) in seq.iter().enumerate() {
            write_rgb8_png(&frames_dir.join(frame_file(t)), spec.height, spec.width, render_rgb8(v, &spec)?)?;
            flm.push(face_landmarks(v, &spec)?);
        }
        write_flm_csv(&dir.join("flm.csv"), &flm, true)?;
        all_landmarks.extend(flm);
        samples.push(ManifestSample {
            id,
            text: text.clone(),
            num_frames: seq.len(),
        });
    }
    let avg = average_landmarks(&all_landmarks)?;
    write_flm_csv(&out_dir.join(AVG_FLM_FILE), std::slice::from_ref(&avg), false)?;
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.clone(),
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn is_fixed6(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    match body.split_once('.') {
        Some((int, frac)) => {
            !int.is_empty()
                && int.bytes().all(|b| b.is_ascii_digit())
                && frac.len() == 6
                && frac.bytes().all(|b| b.is_ascii_digit())
        }
        None => false,
    }
}

/// Reads a numeric table, checking header, column count, the frame column
/// and the six-decimal float format. Returns the float columns per row.
fn read_table(path: &Path, header: &[String], frame_column: bool) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut records = rdr.records();
    match records.next() {
        None => return Err(Error::format(path.display(), 1, "missing header row")),
        Some(rec) => {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            if rec.iter().ne(header.iter().map(String::as_str)) {
                return Err(Error::format(path.display(), 1, "unexpected header row"));
            }
        }
    }
    for (row_index, rec) in records.enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = row_index + 2;
        if rec.len() != header.len() {
            return Err(Error::format(
                path.display(),
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let mut fields = rec.iter();
        if frame_column {
            let f = fields.next().unwrap_or_default();
            if f.parse::<usize>().ok() != Some(row_index) {
                return Err(Error::format(path.display(), line, format!("frame index {f:?}, expected {row_index}")));
            }
        }
        let mut values = Vec::with_capacity(header.len());
        for f in fields {
            if !is_fixed6(f) {
                return Err(Error::format(path.display(), line, format!("{f:?} is not a six-decimal number")));
            }
            values.push(f.parse::<f64>().map_err(|e| Error::format(path.display(), line, e.to_string()))?);
        }
        rows.push(values);
    }
    Ok(rows)
}

fn check_rows(path: &Path, got: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(n) if n != got => Err(Error::format(path.display(), got + 1, format!("{got} rows, expected {n}"))),
        _ if got == 0 => Err(Error::format(path.display(), 2, "no data rows")),
        _ => Ok(()),
    }
}

/// Reads a raw AU+PS table and returns normalized vectors.
pub fn read_aups_csv(path: &Path, expected_rows: Option<usize>) -> Result<Vec<AupsVector>> {
    let rows = read_table(path, &aups_header(), true)?;
    check_rows(path, rows.len(), expected_rows)?;
    rows.iter()
        .enumerate()
        .map(|(t, r)| {
            debug_assert_eq!(r.len(), AUPS_DIM);
            AupsVector::from_slice(r, false)
                .and_then(|v| normalize_aups(&v))
                .map_err(|e| Error::format(path.display(), t + 2, e.to_string()))
        })
        .collect()
}

fn rows_to_landmarks(path: &Path, rows: Vec<Vec<f64>>) -> Result<Vec<LandmarkSet>> {
    rows.into_iter()
        .enumerate()
        .map(|(t, r)| {
            LandmarkSet::new(r.chunks(2).map(|p| (p[0], p[1])).collect())
                .map_err(|e| Error::format(path.display(), t + 2, e.to_string()))
        })
        .collect()
}

pub fn read_flm_csv(path: &Path, expected_rows: Option<usize>) -> Result<Vec<LandmarkSet>> {
    let rows = read_table(path, &flm_header(), true)?;
    check_rows(path, rows.len(), expected_rows)?;
    rows_to_landmarks(path, rows)
}

pub fn read_avg_flm_csv(path: &Path) -> Result<LandmarkSet> {
    let rows = read_table(path, &flm_columns(), false)?;
    check_rows(path, rows.len(), Some(1))?;
    Ok(rows_to_landmarks(path, rows)?.remove(0))
}

pub fn read_png(path: &Path, height: usize, width: usize) -> Result<FrameImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::format(path.display(), 0, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    if rgb.height() as usize != height || rgb.width() as usize != width {
        return Err(Error::format(
            path.display(),
            0,
            format!("image is {}x{}, expected {height}x{width}", rgb.height(), rgb.width()),
        ));
    }
    FrameImage::from_rgb8(height, width, rgb.as_raw())
}

/// Read-only view of a generated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display(), e.line(), e.to_string()))?;
        manifest
            .config
            .validate()
            .map_err(|e| Error::format(path.display(), 0, e.to_string()))?;
        if manifest.samples.is_empty() {
            return Err(Error::format(path.display(), 0, "manifest lists no samples"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Config the corpus was rendered with.
    pub fn config(&self) -> &PipelineConfig {
        &self.manifest.config
    }

    pub fn samples(&self) -> &[ManifestSample] {
        &self.manifest.samples
    }

    pub fn sample(&self, id: &str) -> Result<&ManifestSample> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Data(format!("no sample {id:?} in {}", self.root.display())))
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn load_aups(&self, id: &str) -> Result<Vec<AupsVector>> {
        let s = self.sample(id)?;
        read_aups_csv(&self.sample_dir(id).join("aups.csv"), Some(s.num_frames))
    }

    pub fn load_landmarks(&self, id: &str) -> Result<Vec<LandmarkSet>> {
        let s = self.sample(id)?;
        read_flm_csv(&self.sample_dir(id).join("flm.csv"), Some(s.num_frames))
    }

    pub fn load_avg_flm(&self) -> Result<LandmarkSet> {
        read_avg_flm_csv(&self.root.join(AVG_FLM_FILE))
    }

    /// First `limit` frames (all when `None`).
    pub fn load_frames(&self, id: &str, limit: Option<usize>) -> Result<Vec<FrameImage>> {
        let s = self.sample(id)?;
        let n = limit.map_or(s.num_frames, |l| l.min(s.num_frames));
        let cfg = self.config();
        let dir = self.sample_dir(id).join("frames");
        (0..n).map(|t| read_png(&dir.join(frame_file(t)), cfg.image_h, cfg.image_w)).collect()
    }

    /// Text, normalized AU+PS and frames of one sample, truncated to
    /// `limit` frames when given.
    pub fn load_sample(&self, id: &str, limit: Option<usize>) -> Result<SampleRecord> {
        let s = self.sample(id)?;
        let mut aups = self.load_aups(id)?;
        let frames = self.load_frames(id, limit)?;
        aups.truncate(frames.len());
        SampleRecord::new(id, s.text.clone(), aups, frames)
    }

    /// Checks every file against the layout and formats.
    pub fn validate(&self) -> Result<()> {
        self.load_avg_flm()?;
        for s in self.samples() {
            self.load_aups(&s.id)?;
            self.load_landmarks(&s.id)?;
            self.load_frames(&s.id, None)?;
            let dir = self.sample_dir(&s.id).join("frames");
            let extra = dir.join(frame_file(s.num_frames));
            if extra.exists() {
                return Err(Error::format(extra.display(), 0, "frame beyond num_frames"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            image_h: 16,
            image_w: 16,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn three_words_give_twelve_frames() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&["one two three".into()], &small_cfg(), dir.path()).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.samples[0].num_frames, 12);
        let c = Corpus::open(dir.path()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.load_aups("s0000").unwrap().len(), 12);
        let text = fs::read_to_string(dir.path().join("samples/s0000/aups.csv")).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("frame,au01,au02,au04,"));
        assert!(text.lines().next().unwrap().ends_with(",au45,pitch,yaw,roll"));
    }

    #[test]
    fn fixed6_format() {
        assert!(is_fixed6("0.000000"));
        assert!(is_fixed6("-1.570796"));
        assert!(!is_fixed6("1.5"));
        assert!(!is_fixed6(".123456"));
        assert!(!is_fixed6("1e-3"));
        assert_eq!(fmt6(-1e-9), "0.000000");
    }

    #[test]
    fn nonempty_output_dir_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "").unwrap();
        assert!(matches!(
            generate_corpus(&["a".into()], &small_cfg(), dir.path()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn corrupt_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&["a b".into()], &small_cfg(), dir.path()).unwrap();
        let p = dir.path().join("samples/s0000/flm.csv");
        let mut lines: Vec<String> = fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
        lines[3] = lines[3].replacen(",0.", ",0.1", 1);
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        match Corpus::open(dir.path()).unwrap().validate() {
            Err(Error::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn avg_flm_matches_direct_mean() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&["alpha beta".into(), "gamma".into()], &small_cfg(), dir.path()).unwrap();
        let c = Corpus::open(dir.path()).unwrap();
        let mut sum = vec![0.0; 2 * LANDMARK_COUNT];
        let mut n = 0.0;
        for s in c.samples() {
            for lm in c.load_landmarks(&s.id).unwrap() {
                for (acc, v) in sum.iter_mut().zip(lm.flatten()) {
                    *acc += v;
                }
                n += 1.0;
            }
        }
        let avg = c.load_avg_flm().unwrap().flatten();
        for (a, s) in avg.iter().zip(&sum) {
            assert!((a - s / n).abs() <= 1e-6);
        }
    }
}
