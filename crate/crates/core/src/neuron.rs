//! Leaky integrate-and-fire neurons: binary LIF, integer I-LIF and the
//! range-aligned integer-binary IBRA-LIF.
//!
//! All three share one update: charge `v_pre = alpha * v + input`, emit an
//! activation `o`, then soft-reset `v = v_pre - o`. They differ in the emission
//! rule:
//!
//! | kind     | emitted level `k`                        | activation `o` |
//! |----------|------------------------------------------|----------------|
//! | LIF      | `1` if `v_pre >= v_th` else `0`          | `k`            |
//! | I-LIF    | `clip(round(v_pre), 0, D)`               | `k`            |
//! | IBRA-LIF | `clip(round(v_pre * N), 0, D * N)`       | `k / N`        |
//!
//! The integer level `k` is what the lowered network transmits as spikes.
//! Rounding is half away from zero in every phase.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronKind {
    Lif,
    ILif,
    IbraLif,
}

#[derive(Debug, thiserror::Error)]
pub enum NeuronError {
    #[error("invalid neuron config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters of one neuron layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    /// Membrane decay, in `(0, 1]`.
    pub alpha: f64,
    /// Firing threshold; only LIF uses it.
    pub v_th: f64,
    /// Largest activation the neuron can emit.
    pub d: f64,
    /// Range-alignment scale; `1` for LIF and I-LIF.
    pub n: u32,
    pub timesteps: usize,
}

impl NeuronConfig {
    pub fn lif(v_th: f64, alpha: f64, timesteps: usize) -> Self {
        Self {
            kind: NeuronKind::Lif,
            alpha,
            v_th,
            d: 1.0,
            n: 1,
            timesteps,
        }
    }

    pub fn ilif(d: u32, timesteps: usize) -> Self {
        Self {
            kind: NeuronKind::ILif,
            alpha: 1.0,
            v_th: 1.0,
            d: d as f64,
            n: 1,
            timesteps,
        }
    }

    pub fn ibra(d: f64, n: u32, timesteps: usize) -> Self {
        Self {
            kind: NeuronKind::IbraLif,
            alpha: 1.0,
            v_th: 1.0,
            d,
            n,
            timesteps,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let err = |m: String| Err(NeuronError::Config(m));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return err(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.timesteps == 0 {
            return err("timesteps must be >= 1".into());
        }
        if self.n == 0 {
            return err("scaling factor N must be >= 1".into());
        }
        match self.kind {
            NeuronKind::Lif => {
                if self.n != 1 {
                    return err("LIF requires N = 1".into());
                }
                if !(self.v_th > 0.0 && self.v_th.is_finite()) {
                    return err(format!("threshold {} must be positive", self.v_th));
                }
            }
            NeuronKind::ILif | NeuronKind::IbraLif => {
                if self.kind == NeuronKind::ILif && self.n != 1 {
                    return err("I-LIF requires N = 1".into());
                }
                let scaled = self.d * self.n as f64;
                if !(scaled.is_finite() && scaled >= 0.5) || (scaled - scaled.round()).abs() > 1e-6 {
                    return err(format!("D * N = {scaled} is not a positive integer"));
                }
                if scaled.round() > i32::MAX as f64 {
                    return err(format!("D * N = {scaled} exceeds the integer range"));
                }
            }
        }
        Ok(())
    }

    /// Integer ceiling `D_N = round(D * N)` of the emitted level.
    pub fn d_n(&self) -> u32 {
        match self.kind {
            NeuronKind::Lif => 1,
            _ => (self.d * self.n as f64).round() as u32,
        }
    }

    /// Number of bit-planes needed for levels in `[0, D_N]`.
    pub fn planes(&self) -> u32 {
        plane_count(self.d_n())
    }

    /// Emitted integer level for pre-firing potential `v_pre`.
    #[inline]
    pub fn level(&self, v_pre: f64) -> i32 {
        match self.kind {
            NeuronKind::Lif => (v_pre >= self.v_th) as i32,
            _ => (v_pre * self.n as f64).round().clamp(0.0, self.d_n() as f64) as i32,
        }
    }

    /// Activation value carried by level `k` during training.
    #[inline]
    pub fn activation(&self, level: i32) -> f64 {
        match self.kind {
            NeuronKind::IbraLif => level as f64 / self.n as f64,
            _ => level as f64,
        }
    }

    /// Surrogate derivative of the emission at `v_pre`: a unit boxcar on
    /// `[0, D]` for integer neurons, `|v_pre - v_th| <= 1/2` for LIF.
    #[inline]
    pub fn window(&self, v_pre: f64) -> f64 {
        let inside = match self.kind {
            NeuronKind::Lif => (v_pre - self.v_th).abs() <= 0.5,
            _ => (0.0..=self.d).contains(&v_pre),
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }

    /// One scalar update. Returns `(level, v_pre, v_next)`.
    #[inline]
    pub fn update(&self, v: f64, input: f64) -> (i32, f64, f64) {
        let v_pre = self.alpha * v + input;
        let k = self.level(v_pre);
        (k, v_pre, v_pre - self.activation(k))
    }

    /// Records one update on a tape. `v` is the post-reset potential of the
    /// previous step, `None` at `t = 0`. Returns `(activation, v_next)`.
    pub fn record(&self, tape: &mut Tape, v: Option<Var>, input: Var) -> Result<(Var, Var), TensorError> {
        let v_pre = match v {
            Some(v) => {
                let decayed = tape.scale(v, self.alpha);
                tape.add(decayed, input)?
            }
            None => input,
        };
        let cfg = *self;
        let out = tape.custom_grad_apply(v_pre, move |x| cfg.activation(cfg.level(x)), move |x| cfg.window(x));
        let v_next = tape.sub(v_pre, out)?;
        Ok((out, v_next))
    }
}

/// `B = ceil(log2(d_n + 1))`, the bit width of `d_n`.
pub fn plane_count(d_n: u32) -> u32 {
    u32::BITS - d_n.leading_zeros()
}

/// Post-reset membrane potential of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub v: Tensor,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { v: Tensor::zeros(shape) }
    }
}

/// Output of one neuron update over a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Training-mode activation values.
    pub activation: Tensor,
    /// Integer emitted levels (`activation * N`).
    pub levels: Tensor,
    pub state: NeuronState,
}

fn step(cfg: &NeuronConfig, state: &NeuronState, input: &Tensor) -> Result<Step, NeuronError> {
    if state.v.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "neuron step",
            lhs: state.v.shape().to_vec(),
            rhs: input.shape().to_vec(),
        }
        .into());
    }
    let v = state.v.real_values();
    let i = input.real_values();
    let n = i.len();
    let (mut act, mut lv, mut next) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&v, &x) in v.iter().zip(i.iter()) {
        let (k, _, v_next) = cfg.update(v, x);
        lv.push(k);
        act.push(cfg.activation(k));
        next.push(v_next);
    }
    let shape = input.shape().to_vec();
    Ok(Step {
        activation: Tensor::from_f64(shape.clone(), act)?,
        levels: Tensor::from_i32(shape.clone(), lv)?,
        state: NeuronState {
            v: Tensor::from_f64(shape, next)?,
        },
    })
}

fn require(cfg: &NeuronConfig, kind: NeuronKind) -> Result<(), NeuronError> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(NeuronError::Config(format!("expected a {kind:?} config, got {:?}", cfg.kind)));
    }
    Ok(())
}

/// Binary LIF update with threshold firing and soft reset.
pub fn lif_step(state: &NeuronState, input: &Tensor, cfg: &NeuronConfig) -> Result<Step, NeuronError> {
    require(cfg, NeuronKind::Lif)?;
    step(cfg, state, input)
}

/// Integer LIF update: round, clip to `[0, D]`, soft reset.
pub fn ilif_step(state: &NeuronState, input: &Tensor, cfg: &NeuronConfig) -> Result<Step, NeuronError> {
    require(cfg, NeuronKind::ILif)?;
    if cfg.d.fract() != 0.0 {
        return Err(NeuronError::Config(format!("I-LIF needs an integer D, got {}", cfg.d)));
    }
    step(cfg, state, input)
}

/// Range-aligned update: scale by `N`, round, clip to `[0, D_N]`, divide by `N`.
pub fn ibra_step(state: &NeuronState, input: &Tensor, cfg: &NeuronConfig) -> Result<Step, NeuronError> {
    require(cfg, NeuronKind::IbraLif)?;
    step(cfg, state, input)
}

/// `T` identical copies of `image`.
pub fn encode_direct(image: &Tensor, timesteps: usize) -> Vec<Tensor> {
    vec![image.clone(); timesteps]
}

/// Feeds `image` as a constant current into a neuron layer for `cfg.timesteps`
/// steps and returns that layer's activations.
pub fn encode_spike_first_layer(image: &Tensor, cfg: &NeuronConfig) -> Result<Vec<Tensor>, NeuronError> {
    cfg.validate()?;
    let mut state = NeuronState::zeros(image.shape());
    let mut out = Vec::with_capacity(cfg.timesteps);
    for _ in 0..cfg.timesteps {
        let s = step(cfg, &state, image)?;
        out.push(s.activation);
        state = s.state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_f64(vec![1], vec![v]).unwrap()
    }

    fn state(v: f64) -> NeuronState {
        NeuronState { v: scalar(v) }
    }

    fn only(t: &Tensor) -> f64 {
        t.real_values()[0]
    }

    #[test]
    fn lif_charge_fire_reset() {
        let cfg = NeuronConfig::lif(1.0, 0.5, 1);
        let s = lif_step(&state(0.5), &scalar(0.8), &cfg).unwrap();
        assert_eq!(only(&s.activation), 1.0);
        assert!((only(&s.state.v) - 0.05).abs() < 1e-12);

        let s = lif_step(&state(0.0), &scalar(0.0), &cfg).unwrap();
        assert_eq!(only(&s.activation), 0.0);
        assert_eq!(only(&s.state.v), 0.0);
    }

    #[test]
    fn lif_matches_scalar_reference_on_a_stream() {
        let cfg = NeuronConfig::lif(1.0, 0.5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<f64> = (0..100).map(|_| rng.random_range(-0.5..1.5)).collect();
        let (mut v_ref, mut spikes_ref) = (0.0f64, 0);
        for &i in &inputs {
            let pre = 0.5 * v_ref + i;
            let s = if pre >= 1.0 { 1.0 } else { 0.0 };
            spikes_ref += s as i32;
            v_ref = pre - s;
        }
        let mut st = state(0.0);
        let mut spikes = 0;
        for &i in &inputs {
            let s = lif_step(&st, &scalar(i), &cfg).unwrap();
            spikes += only(&s.activation) as i32;
            st = s.state;
        }
        assert_eq!(spikes, spikes_ref);
        assert_eq!(only(&st.v), v_ref);
    }

    #[test]
    fn ilif_round_then_clip() {
        let cfg = NeuronConfig::ilif(4, 1);
        for (v_pre, expected) in [(2.6, 3.0), (7.2, 4.0), (-0.4, 0.0)] {
            let s = ilif_step(&state(0.0), &scalar(v_pre), &cfg).unwrap();
            assert_eq!(only(&s.activation), expected);
        }
    }

    #[test]
    fn ibra_scaled_levels() {
        let cfg = NeuronConfig::ibra(5.11, 100, 1);
        assert_eq!(cfg.d_n(), 511);
        assert_eq!(cfg.planes(), 9);
        let s = ibra_step(&state(0.0), &scalar(0.01234), &cfg).unwrap();
        assert_eq!(only(&s.activation), 0.01);
        assert_eq!(s.levels.as_i32().unwrap(), &[1]);
        let s = ibra_step(&state(0.0), &scalar(9.0), &cfg).unwrap();
        assert_eq!(s.levels.as_i32().unwrap(), &[511]);
        assert_eq!(only(&s.activation), 5.11);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let cfg = NeuronConfig::ilif(4, 1);
        assert_eq!(cfg.level(2.5), 3);
        assert_eq!(cfg.level(0.5), 1);
    }

    #[test]
    fn kind_mismatch_and_bad_configs() {
        let lif = NeuronConfig::lif(1.0, 0.5, 1);
        assert!(ibra_step(&state(0.0), &scalar(1.0), &lif).is_err());
        assert!(NeuronConfig::ibra(5.115, 100, 1).validate().is_err());
        assert!(NeuronConfig::ibra(5.11, 100, 1).with_alpha(0.0).validate().is_err());
        assert!(NeuronConfig { n: 10, ..NeuronConfig::ilif(4, 1) }.validate().is_err());
        assert!(NeuronConfig::ibra(5.11, 100, 0).validate().is_err());
    }

    #[test]
    fn plane_counts_for_ablation_configs() {
        for b in 4..=13u32 {
            assert_eq!(plane_count((1 << b) - 1), b);
        }
        assert_eq!(plane_count(1), 1);
        assert_eq!(plane_count(4), 3);
    }

    #[test]
    fn surrogate_window_matches_boxcar() {
        let cfg = NeuronConfig::ilif(4, 1);
        assert_eq!(cfg.window(2.3), 1.0);
        assert_eq!(cfg.window(-0.5), 0.0);
        assert_eq!(cfg.window(5.0), 0.0);
        assert_eq!(cfg.window(0.0), 1.0);
        assert_eq!(cfg.window(4.0), 1.0);
    }

    #[test]
    fn direct_encoding_copies() {
        let img = Tensor::from_f64(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(encode_direct(&img, 1), vec![img.clone()]);
        let three = encode_direct(&img, 3);
        assert_eq!(three.len(), 3);
        assert!(three.iter().all(|c| c == &img));
    }

    #[test]
    fn spike_encoding() {
        let zero = Tensor::zeros(&[3, 3]);
        let cfg = NeuronConfig::lif(1.0, 1.0, 2);
        for s in encode_spike_first_layer(&zero, &cfg).unwrap() {
            assert!(s.real_values().iter().all(|&x| x == 0.0));
        }
        // Constant current at threshold fires on the first step.
        let at_th = Tensor::full(&[1], 1.0);
        let out = encode_spike_first_layer(&at_th, &cfg).unwrap();
        assert_eq!(only(&out[0]), 1.0);
    }

    #[test]
    fn spike_encoding_equals_manual_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_f64(vec![16], (0..16).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let cfg = NeuronConfig::ibra(1.27, 100, 3).with_alpha(0.7);
        let encoded = encode_spike_first_layer(&img, &cfg).unwrap();
        let mut st = NeuronState::zeros(&[16]);
        for enc in &encoded {
            let s = ibra_step(&st, &img, &cfg).unwrap();
            assert_eq!(&s.activation, enc);
            st = s.state;
        }
    }

    #[test]
    fn tape_record_matches_scalar_update() {
        let cfg = NeuronConfig::ibra(2.55, 100, 2).with_alpha(0.5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(vec![3], vec![0.3, 3.7, -1.0]).unwrap());
        let (o1, v1) = cfg.record(&mut tape, None, x).unwrap();
        let (o2, _) = cfg.record(&mut tape, Some(v1), x).unwrap();
        let mut v = [0.0; 3];
        for (t, o) in [o1, o2].into_iter().enumerate() {
            for (j, &i) in [0.3, 3.7, -1.0].iter().enumerate() {
                let (k, _, next) = cfg.update(v[j], i);
                assert_eq!(tape.value(o).real_values()[j], cfg.activation(k), "t={t} j={j}");
                v[j] = next;
            }
        }
    }

    proptest! {
        #[test]
        fn ibra_range_and_conservation(
            inputs in proptest::collection::vec(-3.0f64..8.0, 1..40),
            alpha in 0.1f64..=1.0,
        ) {
            let cfg = NeuronConfig::ibra(5.11, 100, 1).with_alpha(alpha);
            let mut v = 0.0;
            for &i in &inputs {
                let (k, v_pre, next) = cfg.update(v, i);
                let o = cfg.activation(k);
                prop_assert!((0.0..=5.11).contains(&o));
                prop_assert!((0..=511).contains(&k));
                prop_assert_eq!(v_pre - o, next);
                v = next;
            }
        }

        #[test]
        fn ibra_with_unit_scale_is_ilif(inputs in proptest::collection::vec(-3.0f64..8.0, 1..40)) {
            let ibra = NeuronConfig::ibra(4.0, 1, 1);
            let ilif = NeuronConfig::ilif(4, 1);
            let (mut st_a, mut st_b) = (NeuronState::zeros(&[1]), NeuronState::zeros(&[1]));
            for &i in &inputs {
                let a = ibra_step(&st_a, &scalar(i), &ibra).unwrap();
                let b = ilif_step(&st_b, &scalar(i), &ilif).unwrap();
                prop_assert_eq!(&a.activation, &b.activation);
                st_a = a.state;
                st_b = b.state;
            }
        }
    }
}
