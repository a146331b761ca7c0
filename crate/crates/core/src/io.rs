//! File-format helpers: binary PPM images, pretty JSON, JSON-lines append,
//! hex digests, and the on-disk layout of a run directory.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `value` as human-readable JSON with a trailing newline.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Appends `value` as one compact JSON line, creating the file if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Writes one frame of a `[frames, h, w, c]` grid in `[0, 1]` as binary PPM.
/// Three channels map to RGB directly; one channel is replicated to gray RGB.
pub fn write_ppm(path: &Path, grid: &Tensor, frame: usize) -> Result<()> {
    let s = grid.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [frames, h, w, c] grid, got {s:?}")));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    if frame >= f {
        return Err(Error::contract(format!("frame {frame} out of {f}")));
    }
    if c != 1 && c != 3 {
        return Err(Error::contract(format!("can only write 1- or 3-channel grids, got {c}")));
    }
    let quant = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let base = frame * h * w * c;
    for i in 0..h * w {
        if c == 3 {
            for ch in 0..3 {
                bytes.push(quant(grid.data()[base + i * 3 + ch]));
            }
        } else {
            let g = quant(grid.data()[base + i]);
            bytes.extend_from_slice(&[g, g, g]);
        }
    }
    let mut file = File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PPM into a `[1, h, w, 3]` grid in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::contract(format!("{}: {msg}", path.display()));
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed; one whitespace byte then raw pixel data.
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = next_token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = h * w * 3;
    let pixels = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w, 3], data)
}

/// Standard layout of one run's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// Creates the directory tree (idempotent).
    pub fn ensure(&self) -> Result<()> {
        fs::create_dir_all(self.images_dir())?;
        fs::create_dir_all(self.reports_dir())?;
        Ok(())
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        // Values already on the 1/255 grid survive a round trip exactly.
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let grid = Tensor::new(vec![1, 2, 3, 3], data.clone()).unwrap();
        write_ppm(&path, &grid, 0).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3, 3]);
        assert_eq!(back.data(), grid.data());
    }

    #[test]
    fn single_channel_replicates_to_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.ppm");
        let grid = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        write_ppm(&path, &grid, 0).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn write_ppm_selects_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f1.ppm");
        let grid = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 1.0]).unwrap();
        write_ppm(&path, &grid, 1).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), &[1.0, 1.0, 1.0]);
        assert!(write_ppm(&path, &grid, 2).is_err());
    }

    #[test]
    fn ppm_clamps_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clamp.ppm");
        let grid = Tensor::new(vec![1, 1, 2, 1], vec![-0.5, 1.5]).unwrap();
        write_ppm(&path, &grid, 0).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn read_ppm_handles_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2, 3]);
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn jsonl_appends_one_line_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        append_jsonl(&path, &serde_json::json!({"step": 1})).unwrap();
        append_jsonl(&path, &serde_json::json!({"step": 2})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(text.ends_with('\n'));
        let row: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(row["step"], 2);
    }

    #[test]
    fn pretty_json_ends_with_newline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        write_json_pretty(&path, &serde_json::json!({"a": 1})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn run_dir_layout() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run1"));
        run.ensure().unwrap();
        assert!(run.images_dir().is_dir());
        assert!(run.reports_dir().is_dir());
        assert_eq!(run.checkpoint().file_name().unwrap(), "model.ckpt");
        run.ensure().unwrap(); // idempotent
    }
}
