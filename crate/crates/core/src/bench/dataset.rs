use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CflError, Result};
use crate::nn::Tensor;
use crate::supernet::Batch;

const CACHE_MAGIC: &[u8; 4] = b"CFLD";
const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

/// Labelled images with a quality level per sample, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    quality: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        num_classes: usize,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        quality: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || num_classes == 0 || num_classes > 256 {
            return Err(CflError::Config(format!("bad dataset shape {:?} / {} classes", shape, num_classes)));
        }
        if pixels.len() != labels.len() * per || quality.len() != labels.len() {
            return Err(CflError::Structural(format!(
                "{} pixels, {} labels, {} quality tags for sample shape {:?}",
                pixels.len(),
                labels.len(),
                quality.len(),
                shape
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(CflError::Structural(format!("label {} out of range for {} classes", y, num_classes)));
        }
        if let Some(&q) = quality.iter().find(|&&q| q > u8::MAX as usize) {
            return Err(CflError::Structural(format!("quality tag {} does not fit a byte", q)));
        }
        Ok(Dataset { shape, num_classes, pixels, labels, quality })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn quality(&self) -> &[usize] {
        &self.quality
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels_of(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Sample `i` as a `[C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.pixels_of(i).to_vec()).expect("shape checked at construction")
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(CflError::Argument(format!("sample {} out of range for {} samples", bad, self.len())));
        }
        let mut pixels = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            pixels.extend_from_slice(self.pixels_of(i));
        }
        Dataset::new(
            self.shape,
            self.num_classes,
            pixels,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.quality[i]).collect(),
        )
    }

    /// Applies `f` to every image and tags the result with `quality`.
    pub fn map_images<F>(&self, quality: usize, f: F) -> Result<Dataset>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            pixels.extend(f(&self.image(i))?.into_data());
        }
        Dataset::new(self.shape, self.num_classes, pixels, self.labels.clone(), vec![quality; self.len()])
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| CflError::Argument("nothing to concatenate".into()))?;
        let (mut pixels, mut labels, mut quality) = (Vec::new(), Vec::new(), Vec::new());
        for p in parts {
            if p.shape != first.shape || p.num_classes != first.num_classes {
                return Err(CflError::Structural("datasets disagree on sample shape or classes".into()));
            }
            pixels.extend_from_slice(&p.pixels);
            labels.extend_from_slice(&p.labels);
            quality.extend_from_slice(&p.quality);
        }
        Dataset::new(first.shape, first.num_classes, pixels, labels, quality)
    }

    /// Every sample as one `[N, C, H, W]` batch.
    pub fn to_batch(&self) -> Result<Batch> {
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![self.len(), c, h, w], self.pixels.clone())?;
        Ok(Batch { x, labels: self.labels.clone() })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `CFLD`, then count, C, H, W, classes as u32 LE; per sample a label
    /// byte, a quality byte and the pixels as f64 LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        for v in [self.len(), self.shape[0], self.shape[1], self.shape[2], self.num_classes] {
            let v = u32::try_from(v).map_err(|_| CflError::Argument(format!("{} does not fit the cache header", v)))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.len() {
            w.write_all(&[self.labels[i] as u8, self.quality[i] as u8])?;
            for p in self.pixels_of(i) {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(CflError::Parse(format!("not a dataset cache (magic {:?})", magic)));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [n, c, hh, ww, classes] = header;
        let per = c * hh * ww;
        let mut pixels = Vec::with_capacity(n * per);
        let (mut labels, mut quality) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut tag = [0u8; 2];
        let mut buf = vec![0u8; per * 8];
        for _ in 0..n {
            r.read_exact(&mut tag)?;
            labels.push(tag[0] as usize);
            quality.push(tag[1] as usize);
            r.read_exact(&mut buf)?;
            pixels.extend(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))));
        }
        Dataset::new([c, hh, ww], classes, pixels, labels, quality)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an IDX image file and its label file into a dataset with pixels
/// scaled to `[0, 1]` and quality tag 1 (unprocessed).
pub fn read_idx<R1: Read, R2: Read>(images: &mut R1, labels: &mut R2, num_classes: usize) -> Result<Dataset> {
    let magic = read_u32_be(images)?;
    if magic != IDX_IMAGES {
        return Err(CflError::Parse(format!("IDX image magic {} (expected {})", magic, IDX_IMAGES)));
    }
    let n = read_u32_be(images)? as usize;
    let h = read_u32_be(images)? as usize;
    let w = read_u32_be(images)? as usize;
    let magic = read_u32_be(labels)?;
    if magic != IDX_LABELS {
        return Err(CflError::Parse(format!("IDX label magic {} (expected {})", magic, IDX_LABELS)));
    }
    let m = read_u32_be(labels)? as usize;
    if m != n {
        return Err(CflError::Parse(format!("{} images but {} labels", n, m)));
    }
    let mut raw = vec![0u8; n * h * w];
    images.read_exact(&mut raw)?;
    let mut ys = vec![0u8; n];
    labels.read_exact(&mut ys)?;
    let pixels = raw.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new([1, h, w], num_classes, pixels, ys.iter().map(|&y| y as usize).collect(), vec![1; n])
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    read_idx(&mut BufReader::new(File::open(images)?), &mut BufReader::new(File::open(labels)?), num_classes)
}
