use crate::neuron::plane_count;
use crate::tensor::{Tensor, TensorError};

use super::LoweringError;

/// Integer levels `round(a * n)` of an activation tensor, checked to be
/// integral within `1e-6` and inside `[0, d_n]`.
pub fn scaled_levels(activation: &Tensor, n: u32, d_n: u32) -> Result<Vec<i32>, LoweringError> {
    let vals = activation.real_values();
    let mut out = Vec::with_capacity(vals.len());
    for (i, &a) in vals.iter().enumerate() {
        let s = a * n as f64;
        let k = s.round();
        if (s - k).abs() > 1e-6 || !(0.0..=d_n as f64).contains(&k) {
            return Err(LoweringError::Integrity(format!(
                "element {i}: {a} * {n} = {s} is not an integer in [0, {d_n}]"
            )));
        }
        out.push(k as i32);
    }
    Ok(out)
}

/// Bit-planes `[B, ...]` of integer levels: plane `b` holds `(k >> b) & 1`.
pub fn levels_to_bitplanes(shape: &[usize], levels: &[i32], planes: u32) -> Result<Tensor, TensorError> {
    let mut bits = Vec::with_capacity(levels.len() * planes as usize);
    for b in 0..planes {
        bits.extend(levels.iter().map(|&k| ((k >> b) & 1) as u8));
    }
    let mut s = vec![planes as usize];
    s.extend_from_slice(shape);
    Tensor::from_bits(s, bits)
}

/// Splits activations of value `k / n` into `B = ceil(log2(d_n + 1))`
/// bit-planes, least significant first. Output shape is `[B, ...]`.
///
/// ```
/// use ibra_snn::lowering::{reconstruct, to_bitplanes};
/// use ibra_snn::tensor::Tensor;
///
/// let a = Tensor::from_f64(vec![1], vec![0.04]).unwrap();
/// let planes = to_bitplanes(&a, 100, 7).unwrap();
/// assert_eq!(planes.as_bits().unwrap(), &[0, 0, 1]);
/// assert_eq!(reconstruct(&planes).unwrap().as_i32().unwrap(), &[4]);
/// ```
pub fn to_bitplanes(activation: &Tensor, n: u32, d_n: u32) -> Result<Tensor, LoweringError> {
    let levels = scaled_levels(activation, n, d_n)?;
    Ok(levels_to_bitplanes(activation.shape(), &levels, plane_count(d_n))?)
}

/// `sum_b 2^b * planes[b]` over the leading axis.
pub fn reconstruct(planes: &Tensor) -> Result<Tensor, TensorError> {
    let bits = planes.as_bits()?;
    let Some((&b, rest)) = planes.shape().split_first() else {
        return Err(TensorError::Invalid("reconstruct needs a plane axis".into()));
    };
    let len: usize = rest.iter().product();
    let mut out = vec![0i32; len];
    for p in 0..b {
        for (o, &bit) in out.iter_mut().zip(&bits[p * len..(p + 1) * len]) {
            *o += (bit as i32) << p;
        }
    }
    Tensor::from_i32(rest.to_vec(), out)
}

/// Unary expansion `[D, ...]`: level `v` becomes `v` ones then `D - v` zeros.
pub fn to_unary(levels: &Tensor, d: u32) -> Result<Tensor, LoweringError> {
    let vals = levels.real_values();
    let mut ints = Vec::with_capacity(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=d as f64).contains(&v) {
            return Err(LoweringError::Integrity(format!("element {i}: {v} is not an integer in [0, {d}]")));
        }
        ints.push(v as u32);
    }
    let mut bits = Vec::with_capacity(ints.len() * d as usize);
    for step in 0..d {
        bits.extend(ints.iter().map(|&v| (v > step) as u8));
    }
    let mut shape = vec![d as usize];
    shape.extend_from_slice(levels.shape());
    Ok(Tensor::from_bits(shape, bits)?)
}

/// Bit-planes of every timestep, `[T, B, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlaneTrain {
    pub bits: Tensor,
    pub planes: u32,
    pub n: u32,
}

impl BitPlaneTrain {
    pub fn from_steps(steps: &[Tensor], n: u32, d_n: u32) -> Result<Self, LoweringError> {
        let planes = plane_count(d_n);
        let Some(first) = steps.first() else {
            return Err(LoweringError::Integrity("no timesteps".into()));
        };
        let mut bits = Vec::new();
        for s in steps {
            if s.shape() != first.shape() {
                return Err(LoweringError::Integrity(format!(
                    "timestep shapes differ: {:?} vs {:?}",
                    s.shape(),
                    first.shape()
                )));
            }
            bits.extend_from_slice(to_bitplanes(s, n, d_n)?.as_bits()?);
        }
        let mut shape = vec![steps.len(), planes as usize];
        shape.extend_from_slice(first.shape());
        Ok(Self {
            bits: Tensor::from_bits(shape, bits)?,
            planes,
            n,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.bits.shape()[0]
    }

    /// Integer levels per timestep.
    pub fn reconstruct(&self) -> Result<Vec<Tensor>, TensorError> {
        let t = self.timesteps();
        let per = self.bits.numel() / t.max(1);
        let shape = &self.bits.shape()[1..];
        let bits = self.bits.as_bits()?;
        (0..t)
            .map(|i| reconstruct(&Tensor::from_bits(shape.to_vec(), bits[i * per..(i + 1) * per].to_vec())?))
            .collect()
    }
}
