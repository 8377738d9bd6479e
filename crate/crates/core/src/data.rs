//! MNIST ingestion, MNIST segmentation pairs, and the FMAP / PGM file formats.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::attribution::ScoreMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class id of pixels excluded from evaluation.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "LabelMask::new",
                expected: vec![height, width],
                actual: vec![pixels.len()],
            });
        }
        Ok(LabelMask { width, height, pixels })
    }

    pub fn background(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Checks every id is below `num_classes` (background included) or is
    /// [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.pixels.iter().position(|&p| p != IGNORE && p as usize >= num_classes) {
            Some(i) => Err(Error::invalid(format!(
                "mask id {} at pixel {i} is not below {num_classes}",
                self.pixels[i]
            ))),
            None => Ok(()),
        }
    }

    /// Sorted foreground class ids present in the mask.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &p in &self.pixels {
            seen[p as usize] = true;
        }
        (1..255u8).filter(|&c| seen[c as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[1, side, side]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: LabelMask,
    /// Segmentation class id, `digit + 1`.
    pub label: u8,
}

impl SegSample {
    pub fn digit(&self) -> usize {
        self.label as usize - 1
    }
}

/// Contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    Images { rows: usize, cols: usize, images: Vec<Tensor> },
    Labels(Vec<u8>),
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    let ndim = match magic {
        0x0803 => 3,
        0x0801 => 1,
        _ => {
            return Err(Error::BadMagic {
                expected: "0x00000803 or 0x00000801".into(),
                found: format!("{magic:#010x}"),
            })
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after IDX payload", bytes.len() - expected)));
    }
    let payload = &bytes[header..];
    Ok(if ndim == 1 {
        Idx::Labels(payload.to_vec())
    } else {
        let (rows, cols) = (dims[1], dims[2]);
        let images = payload
            .chunks_exact(rows * cols)
            .map(|c| Tensor::new(vec![1, rows, cols], c.iter().map(|&b| b as f32 / 255.0).collect()).unwrap())
            .collect();
        Idx::Images { rows, cols, images }
    })
}

/// Reads an IDX file, transparently gunzipping it.
pub fn load_idx(path: &Path) -> Result<Idx> {
    parse_idx(&read_maybe_gz(path)?)
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    match load_idx(path)? {
        Idx::Images { images, .. } => Ok(images),
        Idx::Labels(_) => Err(Error::Format(format!("{}: expected an image file", path.display()))),
    }
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    match load_idx(path)? {
        Idx::Labels(labels) => Ok(labels),
        Idx::Images { .. } => Err(Error::Format(format!("{}: expected a label file", path.display()))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (plain or .gz)"),
    ))
}

/// Images and digit labels of one split from a directory holding the
/// standard IDX files.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<(Vec<Tensor>, Vec<u8>)> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let images = load_idx_images(&find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = load_idx_labels(&find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!("{} images but {} labels", images.len(), labels.len())));
    }
    Ok((images, labels))
}

/// Nearest-neighbour upsampling of 28×28 digits to `side × side`, with the
/// mask set to `digit + 1` wherever the upsampled intensity is positive.
pub fn build_mnist_seg(images: &[Tensor], labels: &[u8], side: usize) -> Result<Vec<SegSample>> {
    if side != 64 && side != 128 {
        return Err(Error::invalid(format!("side must be 64 or 128, got {side}")));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let index: Vec<usize> = (0..side).map(|i| i * 28 / side).collect();
    images
        .iter()
        .zip(labels)
        .map(|(img, &digit)| {
            if img.shape() != [1, 28, 28] {
                return Err(Error::ShapeMismatch {
                    op: "build_mnist_seg",
                    expected: vec![1, 28, 28],
                    actual: img.shape().to_vec(),
                });
            }
            if digit > 9 {
                return Err(Error::invalid(format!("label {digit} is not a digit")));
            }
            let src = img.data();
            let mut values = Vec::with_capacity(side * side);
            for &sy in &index {
                for &sx in &index {
                    values.push(src[sy * 28 + sx]);
                }
            }
            let label = digit + 1;
            let pixels = values.iter().map(|&v| if v > 0.0 { label } else { 0 }).collect();
            Ok(SegSample {
                image: Tensor::new(vec![1, side, side], values)?,
                mask: LabelMask::new(side, side, pixels)?,
                label,
            })
        })
        .collect()
}

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u16 = 1;

/// Encodes a tensor as FMAP: magic, `u16` version, `u8` dtype (0 = f32),
/// `u8` ndim, `u32` dims, then the row-major little-endian payload.
pub fn encode_fmap(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() == 0 || t.ndim() > 255 {
        return Err(Error::invalid("FMAP needs between 1 and 255 dimensions"));
    }
    if let Some(index) = t.data().iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    out.push(0);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FMAP_MAGIC {
        return Err(Error::BadMagic {
            expected: "FMAP".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FMAP_VERSION {
        return Err(Error::Format(format!("unsupported FMAP version {version}")));
    }
    if bytes[6] != 0 {
        return Err(Error::Format(format!("unsupported FMAP dtype {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    if ndim == 0 {
        return Err(Error::Format("FMAP with zero dimensions".into()));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = header + 4 * shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after FMAP payload", bytes.len() - expected)));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite { index });
    }
    Tensor::new(shape, data)
}

/// Stacks same-sized maps into an `[N, H, W]` tensor.
pub fn stack_maps(maps: &[ScoreMap]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::invalid("empty map stack"))?;
    let mut data = Vec::with_capacity(maps.len() * first.values.len());
    for m in maps {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::ShapeMismatch {
                op: "stack_maps",
                expected: vec![first.height, first.width],
                actual: vec![m.height, m.width],
            });
        }
        data.extend_from_slice(&m.values);
    }
    Tensor::new(vec![maps.len(), first.height, first.width], data)
}

fn classes_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".classes");
    PathBuf::from(s)
}

/// Writes a map stack as FMAP. Class ids go to a `<path>.classes` sidecar
/// unless they are exactly `1..=N`.
pub fn write_fmap(maps: &[ScoreMap], path: &Path) -> Result<()> {
    let bytes = encode_fmap(&stack_maps(maps)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = classes_path(path);
    let default_ids = maps.iter().enumerate().all(|(i, m)| m.class_id == i + 1);
    if default_ids {
        if sidecar.exists() {
            fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        }
    } else {
        let text: Vec<String> = maps.iter().map(|m| m.class_id.to_string()).collect();
        fs::write(&sidecar, text.join("\n") + "\n").map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

/// Reads a 2-D or 3-D FMAP as a stack of maps. Map `i` gets class `i + 1`
/// unless a `<path>.classes` sidecar lists the ids. Maps are marked raw.
pub fn read_fmap(path: &Path) -> Result<Vec<ScoreMap>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = decode_fmap(&bytes)?;
    let (n, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [n, h, w] => (n, h, w),
        _ => return Err(Error::Format(format!("score maps need 2 or 3 dims, found {:?}", t.shape()))),
    };
    let sidecar = classes_path(path);
    let ids: Vec<usize> = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let ids = text
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Format(format!("{}: {e}", sidecar.display()))))
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != n {
            return Err(Error::Format(format!("{} lists {} ids for {n} maps", sidecar.display(), ids.len())));
        }
        ids
    } else {
        (1..=n).collect()
    };
    Ok(t.data()
        .chunks_exact(h * w)
        .zip(ids)
        .map(|(v, id)| ScoreMap::new(id, w, h, v.to_vec(), false).unwrap())
        .collect())
}

/// Binary P5 PGM with maxval 255; ids become gray levels.
pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::Format(format!("P5 required, found {magic}")));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        token(pos)?
            .parse()
            .map_err(|_| Error::Format(format!("invalid PGM {what}")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval must be 255, found {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after PGM header".into()));
    }
    let payload = &bytes[pos + 1..];
    let expected = width * height;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after PGM raster", payload.len() - expected)));
    }
    LabelMask::new(width, height, payload.to_vec())
}

pub fn write_mask_pgm(mask: &LabelMask, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_fmap(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_fmap(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Segmentation samples on disk: `images/<stem>.fmap`, `masks/<stem>.pgm`
/// and `labels.csv` with columns `stem,label`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    pub stems: Vec<String>,
    pub samples: Vec<SegSample>,
}

impl SegDataset {
    /// Stems are the zero-padded sample indices.
    pub fn indexed(samples: Vec<SegSample>) -> Self {
        SegDataset {
            stems: (0..samples.len()).map(|i| format!("{i:05}")).collect(),
            samples,
        }
    }

    pub fn image_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join("images").join(format!("{stem}.fmap"))
    }

    pub fn mask_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join("masks").join(format!("{stem}.pgm"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let labels_path = dir.join("labels.csv");
        let file = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut labels = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Format(format!("labels.csv: {e}"));
        labels.write_record(["stem", "label"]).map_err(csv_err)?;
        for (stem, s) in self.stems.iter().zip(&self.samples) {
            write_tensor(&s.image, &Self::image_path(dir, stem))?;
            write_mask_pgm(&s.mask, &Self::mask_path(dir, stem))?;
            labels.write_record([stem.as_str(), &s.label.to_string()]).map_err(csv_err)?;
        }
        labels.flush().map_err(|e| Error::io(&labels_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let labels_path = dir.join("labels.csv");
        let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut out = SegDataset {
            stems: Vec::new(),
            samples: Vec::new(),
        };
        for (line, record) in reader.records().enumerate() {
            let bad = |msg: String| Error::Format(format!("{} row {}: {msg}", labels_path.display(), line + 1));
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", record.len())));
            }
            let stem = record[0].to_string();
            let label: u8 = record[1].parse().map_err(|_| bad(format!("invalid label {:?}", &record[1])))?;
            if label == 0 || label == IGNORE {
                return Err(bad(format!("label {label} is not a foreground class")));
            }
            let image = read_tensor(&Self::image_path(dir, &stem))?;
            let (_, h, w) = image.dims3("dataset image")?;
            let mask = read_mask_pgm(&Self::mask_path(dir, &stem))?;
            if (mask.height, mask.width) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "dataset mask",
                    expected: vec![h, w],
                    actual: vec![mask.height, mask.width],
                });
            }
            out.stems.push(stem);
            out.samples.push(SegSample { image, mask, label });
        }
        Ok(out)
    }
}
