//! Sequence directories: numbered PPM/PNG frames (directly or under
//! `img/`), `groundtruth.txt` with one `x,y,w,h` line per frame, and an
//! optional `meta.txt` with `seed=` and `attributes=` lines.

use std::fs;
use std::path::{Path, PathBuf};

use dsatrack_core::eval::{Attribute, SequenceRecord};
use dsatrack_core::head::BBox;
use dsatrack_core::image::Image;

use crate::error::{CliError, CliResult};

pub const GROUNDTRUTH: &str = "groundtruth.txt";
pub const RESULTS: &str = "results.txt";
pub const META: &str = "meta.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Ppm,
    Png,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Png => "png",
        }
    }
}

/// Parses `x,y,w,h` lines (commas, tabs or spaces); blank lines are skipped.
pub fn parse_boxes(text: &str) -> CliResult<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::invalid(format!("line {}: {e}", i + 1)))?;
            if v.len() != 4 {
                return Err(CliError::invalid(format!("line {}: expected x,y,w,h", i + 1)));
            }
            BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| CliError::invalid(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        s.push_str(&format!("{x:.3},{y:.3},{w:.3},{h:.3}\n"));
    }
    s
}

pub fn read_boxes(path: &Path) -> CliResult<Vec<BBox>> {
    parse_boxes(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> CliResult<()> {
    fs::write(path, format_boxes(boxes)).map_err(|e| CliError::io(path, e))
}

pub fn read_frame(path: &Path) -> CliResult<Image> {
    let img = image::open(path)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Image::new(w as usize, h as usize, data)?)
}

pub fn write_frame(path: &Path, img: &Image) -> CliResult<()> {
    let data: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, data)
        .ok_or_else(|| CliError::invalid("frame buffer size mismatch"))?;
    buf.save(path)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn is_frame(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("ppm" | "pnm" | "png")
    )
}

/// Frame files of a sequence directory in name order.
pub fn list_frames(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let img = dir.join("img");
    let root = if img.is_dir() { img } else { dir.to_path_buf() };
    let mut frames: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| CliError::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame(p))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::invalid(format!("{}: no PPM or PNG frames", root.display())));
    }
    Ok(frames)
}

fn parse_meta(text: &str) -> CliResult<(u64, Vec<Attribute>)> {
    let mut seed = 0;
    let mut attrs = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("{META}: bad line `{line}`")))?;
        match k.trim() {
            "seed" => {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::invalid(format!("{META}: seed `{v}`")))?
            }
            "attributes" => {
                attrs = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Attribute::parse)
                    .collect::<Result<_, _>>()?
            }
            _ => {}
        }
    }
    Ok((seed, attrs))
}

/// Loads a whole sequence; the ground truth must cover every frame.
pub fn read_sequence(dir: &Path) -> CliResult<SequenceRecord> {
    let frames = list_frames(dir)?;
    let boxes = read_boxes(&dir.join(GROUNDTRUTH))?;
    if boxes.len() != frames.len() {
        return Err(CliError::invalid(format!(
            "{}: {} frames but {} ground-truth boxes",
            dir.display(),
            frames.len(),
            boxes.len()
        )));
    }
    let meta = dir.join(META);
    let (seed, attributes) = if meta.is_file() {
        parse_meta(&fs::read_to_string(&meta).map_err(|e| CliError::io(&meta, e))?)?
    } else {
        (0, Vec::new())
    };
    Ok(SequenceRecord {
        frames: frames.iter().map(|p| read_frame(p)).collect::<CliResult<_>>()?,
        boxes,
        attributes,
        seed,
    })
}

pub fn write_sequence(dir: &Path, seq: &SequenceRecord, format: FrameFormat) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_frame(&dir.join(format!("{:08}.{}", i + 1, format.extension())), f)?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), &seq.boxes)?;
    let names: Vec<&str> = seq.attributes.iter().map(|a| a.name()).collect();
    let meta = format!("seed={}\nattributes={}\n", seq.seed, names.join(","));
    fs::write(dir.join(META), meta).map_err(|e| CliError::io(&dir.join(META), e))
}

/// Sequence directories under a dataset root: every subdirectory holding a
/// ground-truth file, in name order.
pub fn dataset_sequences(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
