//! On-disk dataset formats: the raw-u8 container and a portable-pixmap
//! directory reader.
//!
//! raw-u8 layout, all integers little-endian:
//!   magic "UDD1" | count u32 | H u32 | W u32 | C u32 | labels count×u8
//!   | pixels count×H×W×C u8
//! Label 255 marks an unlabelled record. Pixels quantize [0,1] to 0..=255.

use super::{Image, ImageRecord};
use crate::error::{data_err, Result, UdiError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: [u8; 4] = *b"UDD1";
pub const UNLABELED: u8 = 255;

pub fn write_raw_u8(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(data_err!("refusing to write an empty dataset"));
    }
    let h = records[0].pixels.h;
    let w = records[0].pixels.w;
    if records.iter().any(|r| r.pixels.h != h || r.pixels.w != w) {
        return Err(data_err!("records have mixed sizes"));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&DATASET_MAGIC)?;
    for v in [records.len() as u32, h as u32, w as u32, 3u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for r in records {
        f.write_all(&[r.label.unwrap_or(UNLABELED)])?;
    }
    for r in records {
        let bytes: Vec<u8> =
            r.pixels.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
    }
    f.flush()?;
    Ok(())
}

/// Streaming reader over a raw-u8 file; records decode lazily.
pub struct RawReader {
    file: BufReader<File>,
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    labels: Vec<u8>,
    next: usize,
    offset: u64,
}

impl RawReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exactly(&mut file, &mut magic, &mut offset)?;
        if magic != DATASET_MAGIC {
            return Err(data_err!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |file: &mut BufReader<File>, offset: &mut u64| -> Result<u32> {
            read_exactly(file, &mut word, offset)?;
            Ok(u32::from_le_bytes(word))
        };
        let count = next_u32(&mut file, &mut offset)? as usize;
        let h = next_u32(&mut file, &mut offset)? as usize;
        let w = next_u32(&mut file, &mut offset)? as usize;
        let c = next_u32(&mut file, &mut offset)? as usize;
        if c != 3 || h == 0 || w == 0 || count == 0 {
            return Err(data_err!("unsupported geometry count={count} h={h} w={w} c={c}"));
        }
        let mut labels = vec![0u8; count];
        read_exactly(&mut file, &mut labels, &mut offset)?;
        Ok(RawReader { file, count, h, w, c, labels, next: 0, offset })
    }
}

fn read_exactly(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..]).map_err(UdiError::Io)?;
        if n == 0 {
            return Err(data_err!(
                "truncated file: {} more bytes expected at offset {}",
                buf.len() - filled,
                *offset + filled as u64
            ));
        }
        filled += n;
    }
    *offset += buf.len() as u64;
    Ok(())
}

impl Iterator for RawReader {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let bytes = self.h * self.w * self.c;
        let mut buf = vec![0u8; bytes];
        if let Err(e) = read_exactly(&mut self.file, &mut buf, &mut self.offset) {
            self.next = self.count;
            return Some(Err(e));
        }
        let label = self.labels[self.next];
        self.next += 1;
        let data: Vec<f32> = buf.into_iter().map(|b| b as f32 / 255.0).collect();
        Some(Ok(ImageRecord {
            pixels: Image { h: self.h, w: self.w, data },
            label: (label != UNLABELED).then_some(label),
            composition: None,
        }))
    }
}

pub fn read_raw_u8(path: &Path) -> Result<Vec<ImageRecord>> {
    RawReader::open(path)?.collect()
}

/// Binary portable pixmap (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<ImageRecord> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err!("truncated ppm header at byte {start}"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(data_err!("not a P6 pixmap"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| data_err!("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| data_err!("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| data_err!("bad maxval"))?;
    if maxval != 255 {
        return Err(data_err!("only maxval 255 supported, got {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(data_err!(
            "truncated file: {} more bytes expected at offset {}",
            pos + need - bytes.len(),
            bytes.len()
        ));
    }
    let data: Vec<f32> = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageRecord { pixels: Image { h, w, data }, label: None, composition: None })
}

/// Every `.ppm` in a directory, deterministic (sorted-name) order.
pub fn read_ppm_dir(dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(data_err!("no .ppm files in {}", dir.display()));
    }
    names.iter().map(|p| read_ppm(p)).collect()
}

/// Binary portable graymap (P5) writer used by attention export.
pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != w * h {
        return Err(data_err!("pgm payload {} != {w}x{h}", bytes.len()));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_scenes, SceneSpec};

    #[test]
    fn raw_u8_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join("udi_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");
        let records = generate_scenes(&SceneSpec::default(), 4, 12);
        write_raw_u8(&path, &records).unwrap();
        let back = read_raw_u8(&path).unwrap();
        assert_eq!(back.len(), records.len());
        // u8 quantization happens on write; a second round trip is exact
        write_raw_u8(&path, &back).unwrap();
        let again = read_raw_u8(&path).unwrap();
        for (a, b) in back.iter().zip(&again) {
            assert_eq!(a.pixels.data, b.pixels.data);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn truncation_reports_missing_bytes() {
        let dir = std::env::temp_dir().join("udi_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.bin");
        let records = generate_scenes(&SceneSpec::default(), 5, 3);
        write_raw_u8(&path, &records).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 100]).unwrap();
        let err = read_raw_u8(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("truncated") && msg.contains("bytes"), "got: {msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("udi_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.bin");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(RawReader::open(&path), Err(UdiError::Data(_))));
    }

    #[test]
    fn ppm_round_trip_via_manual_file() {
        let dir = std::env::temp_dir().join("udi_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ppm");
        let mut payload = b"P6\n# comment\n2 2\n255\n".to_vec();
        payload.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        std::fs::write(&path, payload).unwrap();
        let rec = read_ppm(&path).unwrap();
        assert_eq!(rec.pixels.w, 2);
        assert_eq!(rec.pixels.px(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(rec.pixels.px(1, 1), [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }
}
