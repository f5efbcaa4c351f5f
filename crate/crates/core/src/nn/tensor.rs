use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{structural, CflError, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(structural!("tensor dims must be positive, got {:?}", shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(structural!(
                "shape {:?} needs {} entries, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(structural!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(structural!(
                "{}: shape {:?} does not match {:?}",
                what,
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// `self + scale * other`, elementwise.
    pub fn axpy(&self, scale: f64, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "axpy")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * factor).collect() }
    }

    /// Strides for each axis of the row-major layout.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Select entries along `axis` at `indices`, in the given order.
    pub fn gather_axis(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(structural!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(structural!("index {} out of range for axis {} of size {}", bad, axis, dim));
        }
        if indices.is_empty() {
            return Err(structural!("empty index list for axis {}", axis));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            for &i in indices {
                data.extend_from_slice(&self.data[base + i * inner..base + (i + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`gather_axis`](Self::gather_axis): place slices into a zero tensor
    /// whose `axis` has size `width`. Indices must be unique.
    pub fn scatter_axis(&self, axis: usize, indices: &[usize], width: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(structural!("axis {} out of range for rank {}", axis, self.rank()));
        }
        if indices.len() != self.shape[axis] {
            return Err(structural!(
                "scatter: {} indices for axis {} of size {}",
                indices.len(),
                axis,
                self.shape[axis]
            ));
        }
        let mut seen = vec![false; width];
        for &i in indices {
            if i >= width {
                return Err(structural!("scatter index {} out of range for width {}", i, width));
            }
            if seen[i] {
                return Err(structural!("scatter index {} used twice", i));
            }
            seen[i] = true;
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = width;
        let mut out = Tensor::zeros(&shape);
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let src = (o * dim + j) * inner;
                let dst = (o * width + i) * inner;
                out.data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(out)
    }
}

/// Named parameter collection, iterated in lexicographic id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

const PARAM_MAGIC: &[u8; 4] = b"CFLP";
const PARAM_VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(id.into(), tensor)
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&Tensor> {
        self.entries.get(id).ok_or_else(|| structural!("missing parameter '{}'", id))
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.entries.remove(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Errors unless both sets have the same ids with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self.entries.keys().zip(other.entries.keys()).any(|(a, b)| a != b)
        {
            let mine: Vec<_> = self.entries.keys().collect();
            let theirs: Vec<_> = other.entries.keys().collect();
            return Err(structural!("key sets differ: {:?} vs {:?}", mine, theirs));
        }
        for ((id, a), b) in self.entries.iter().zip(other.entries.values()) {
            if a.shape() != b.shape() {
                return Err(structural!(
                    "parameter '{}' has shape {:?} vs {:?}",
                    id,
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(())
    }

    /// Elementwise `self + scale * other` over matching entries.
    pub fn axpy(&self, scale: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_compatible(other)?;
        let mut out = ParamSet::new();
        for ((id, a), b) in self.entries.iter().zip(other.entries.values()) {
            out.insert(id.clone(), a.axpy(scale, b)?);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.axpy(-1.0, other)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (id, t) in &self.entries {
            out.insert(id.clone(), Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        for (id, t) in &self.entries {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads entries until end of input.
    pub fn read_from<R: Read>(r: &mut R) -> Result<ParamSet> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(CflError::Parse(format!("bad parameter magic {:?}", magic)));
        }
        let version = read_u32(r)?;
        if version != PARAM_VERSION {
            return Err(CflError::Parse(format!("unsupported parameter format version {}", version)));
        }
        let mut out = ParamSet::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read(&mut len_buf[..1])? {
                0 => break,
                _ => r.read_exact(&mut len_buf[1..])?,
            }
            let id_len = u32::from_le_bytes(len_buf) as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|e| CflError::Parse(format!("parameter id is not utf-8: {}", e)))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let tensor = Tensor::new(shape, data).map_err(|e| CflError::Parse(e.to_string()))?;
            if out.insert(id.clone(), tensor).is_some() {
                return Err(CflError::Parse(format!("duplicate parameter id '{}'", id)));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<ParamSet> {
        Self::read_from(&mut bytes)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gather_then_scatter_restores_slices() {
        let t = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let g = t.gather_axis(1, &[1, 3]).unwrap();
        assert_eq!(g.data(), &[1.0, 3.0, 5.0, 7.0]);
        let s = g.scatter_axis(1, &[1, 3], 4).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0]);
        assert!(g.scatter_axis(1, &[1, 1], 4).is_err());
        assert!(g.scatter_axis(1, &[1, 4], 4).is_err());
    }

    #[test]
    fn bad_magic_is_parse_error() {
        let err = ParamSet::from_bytes(b"XXXX\x01\0\0\0").unwrap_err();
        assert!(matches!(err, CflError::Parse(_)));
    }

    #[test]
    fn empty_set_round_trips() {
        let bytes = ParamSet::new().to_bytes();
        assert_eq!(&bytes[..4], b"CFLP");
        assert_eq!(ParamSet::from_bytes(&bytes).unwrap(), ParamSet::new());
    }

    fn arb_paramset() -> impl Strategy<Value = ParamSet> {
        prop::collection::btree_map(
            "[a-z.]{1,12}",
            prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
                let n: usize = shape.iter().product();
                (Just(shape), prop::collection::vec(any::<f64>(), n))
            }),
            0..5,
        )
        .prop_map(|m| {
            m.into_iter().map(|(k, (shape, data))| (k, Tensor::new(shape, data).unwrap())).collect()
        })
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(ps in arb_paramset()) {
            let bytes = ps.to_bytes();
            let back = ParamSet::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.len(), ps.len());
            for ((ia, a), (ib, b)) in ps.iter().zip(back.iter()) {
                prop_assert_eq!(ia, ib);
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
