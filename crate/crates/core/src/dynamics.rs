//! The structured vector field `F(x, u) = f(x) ⊙ (x - g(x, u))`.
//!
//! `f` is a strictly negative decay gain and `g` is the implicit equilibrium
//! map: the zeros of `x - g(x, u)` are exactly the steady states of `F`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nnet::{MlpCheckpoint, MlpSpec, MlpTape, OutputBounds};

/// Anything with a decay gain `f` and an equilibrium map `g`.
///
/// Control and analysis only need `g` and its vector-Jacobian product, so
/// learned fields, analytic splits and hand-written test maps all plug in.
pub trait SplitField: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Decay gain `f(x)`, strictly negative inside the domain.
    fn decay(&self, x: &[f64]) -> Vec<f64>;

    /// Equilibrium map `g(x, u)`.
    fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// `(J_x^T c, J_u^T c)` for the Jacobians of `g` at `(x, u)`.
    fn equilibrium_map_vjp(&self, x: &[f64], u: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>);

    /// `F(x, u) = f(x) ⊙ (x - g(x, u))`.
    fn field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let f = self.decay(x);
        let g = self.equilibrium_map(x, u);
        f.iter().zip(x).zip(&g).map(|((fi, xi), gi)| fi * (xi - gi)).collect()
    }

    /// `r(x) = x - g(x, u)`, zero exactly at the implicit equilibria.
    fn residual(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = self.equilibrium_map(x, u);
        x.iter().zip(&g).map(|(xi, gi)| xi - gi).collect()
    }
}

/// A split field with trainable parameters and a taped vector-Jacobian product
/// of `F` with respect to both parameters and state.
pub trait ParametricField: SplitField + Send + Clone {
    type Tape: Send + Default;

    fn num_params(&self) -> usize;
    fn params(&self) -> &[f64];
    fn set_params(&mut self, params: &[f64]);

    /// Evaluate `F(x, u)` into `out`, recording whatever the reverse pass needs.
    fn field_taped(&self, x: &[f64], u: &[f64], tape: &mut Self::Tape, out: &mut [f64]);

    /// Reverse pass over a tape: parameter gradients are accumulated into
    /// `param_grad`, the state gradient `J_x^T c` overwrites `state_grad`.
    fn field_vjp(&self, tape: &Self::Tape, cotangent: &[f64], param_grad: &mut [f64], state_grad: &mut [f64]);
}

/// Cosine features `(x, cos(1²π s), …, cos(m²π s))` with `s = (x - a)/(b - a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub a: f64,
    pub b: f64,
    pub num_modes: usize,
    pub enabled: bool,
}

impl Featurizer {
    pub fn new(a: f64, b: f64, num_modes: usize) -> Result<Self> {
        if !(a < b) {
            return Err(Error::InvalidConfig(format!("featurizer needs a < b, got a={a}, b={b}")));
        }
        Ok(Self {
            a,
            b,
            num_modes,
            enabled: true,
        })
    }

    pub fn disabled() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            num_modes: 0,
            enabled: false,
        }
    }

    /// Features produced per scalar state component.
    pub fn len(&self) -> usize {
        if self.enabled {
            1 + self.num_modes
        } else {
            1
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn mode_frequency(&self, k: usize) -> f64 {
        (k * k) as f64 * std::f64::consts::PI / (self.b - self.a)
    }

    pub fn featurize(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.featurize_into(x, &mut out);
        out
    }

    fn featurize_into(&self, x: f64, out: &mut Vec<f64>) {
        out.push(x);
        if self.enabled {
            for k in 1..=self.num_modes {
                out.push((self.mode_frequency(k) * (x - self.a)).cos());
            }
        }
    }

    /// Derivative of each feature with respect to `x`.
    pub fn derivative(&self, x: f64) -> Vec<f64> {
        let mut out = vec![1.0];
        if self.enabled {
            for k in 1..=self.num_modes {
                let w = self.mode_frequency(k);
                out.push(-w * (w * (x - self.a)).sin());
            }
        }
        out
    }
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_len("domain box", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidConfig("domain box needs lo < hi in every dimension".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *v >= *l && *v <= *h)
    }
}

/// The learned model: two bounded MLPs sharing one flat parameter vector
/// (f parameters first, then g parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredField {
    state_dim: usize,
    control_dim: usize,
    featurizer: Featurizer,
    f_spec: MlpSpec,
    g_spec: MlpSpec,
    params: Vec<f64>,
    domain: DomainBox,
    seeds: (u64, u64),
}

/// Reverse-pass record for one evaluation of a [`StructuredField`].
#[derive(Debug, Clone, Default)]
pub struct FieldTape {
    x: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    f_tape: MlpTape,
    g_tape: MlpTape,
    g_input: Vec<f64>,
}

impl StructuredField {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        featurizer: Featurizer,
        f_spec: MlpSpec,
        g_spec: MlpSpec,
        domain: DomainBox,
    ) -> Result<Self> {
        check_len("f input", state_dim, f_spec.input_dim())?;
        check_len("f output", state_dim, f_spec.output_dim())?;
        check_len("g output", state_dim, g_spec.output_dim())?;
        check_len("g input", state_dim * featurizer.len() + control_dim, g_spec.input_dim())?;
        check_len("domain box", state_dim, domain.dim())?;
        // The sigmoid output map keeps f strictly below `hi`, so hi = 0 still
        // yields a strictly negative decay gain.
        if f_spec.bounds().hi > 0.0 {
            return Err(Error::InvalidConfig(format!(
                "f upper bound must not be positive, got {}",
                f_spec.bounds().hi
            )));
        }
        let params = vec![0.0; f_spec.num_params() + g_spec.num_params()];
        Ok(Self {
            state_dim,
            control_dim,
            featurizer,
            f_spec,
            g_spec,
            params,
            domain,
            seeds: (0, 0),
        })
    }

    /// Glorot-initialise both networks from independent seeds.
    pub fn init(mut self, f_seed: u64, g_seed: u64) -> Self {
        let mut p = self.f_spec.init_params(f_seed).values;
        p.extend(self.g_spec.init_params(g_seed).values);
        self.params = p;
        self.seeds = (f_seed, g_seed);
        self
    }

    /// Initialise both networks from one seed.
    pub fn init_seeded(self, seed: u64) -> Self {
        self.init(seed.wrapping_mul(2).wrapping_add(1), seed.wrapping_mul(2).wrapping_add(2))
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn f_spec(&self) -> &MlpSpec {
        &self.f_spec
    }

    pub fn g_spec(&self) -> &MlpSpec {
        &self.g_spec
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    fn split_params(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.f_spec.num_params())
    }

    fn g_input(&self, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for &xi in x {
            self.featurizer.featurize_into(xi, out);
        }
        out.extend_from_slice(u);
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        check_len("state", self.state_dim, x.len())
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        check_len("control", self.control_dim, u.len())
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        Ok(self.decay(x))
    }

    pub fn eval_g(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_control(u)?;
        Ok(self.equilibrium_map(x, u))
    }

    pub fn eval_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_control(u)?;
        Ok(self.field(x, u))
    }

    pub fn eval_residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_control(u)?;
        Ok(self.residual(x, u))
    }

    pub fn to_checkpoint(&self) -> FieldCheckpoint {
        let (fp, gp) = self.split_params();
        FieldCheckpoint {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            featurizer: self.featurizer,
            domain: self.domain.clone(),
            f: MlpCheckpoint::new(&self.f_spec, fp, self.seeds.0),
            g: MlpCheckpoint::new(&self.g_spec, gp, self.seeds.1),
        }
    }

    pub fn from_checkpoint(ck: FieldCheckpoint) -> Result<Self> {
        let (f_spec, fp, f_seed) = ck.f.into_parts()?;
        let (g_spec, gp, g_seed) = ck.g.into_parts()?;
        let mut field = Self::new(ck.state_dim, ck.control_dim, ck.featurizer, f_spec, g_spec, ck.domain)?;
        let mut p = fp.values;
        p.extend(gp.values);
        field.params = p;
        field.seeds = (f_seed, g_seed);
        Ok(field)
    }
}

thread_local! {
    static TAPE: std::cell::RefCell<MlpTape> = std::cell::RefCell::new(MlpTape::default());
}

impl SplitField for StructuredField {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn decay(&self, x: &[f64]) -> Vec<f64> {
        let (fp, _) = self.split_params();
        TAPE.with(|t| self.f_spec.forward_taped(fp, x, &mut t.borrow_mut()).to_vec())
    }

    fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (_, gp) = self.split_params();
        let mut input = Vec::with_capacity(self.g_spec.input_dim());
        self.g_input(x, u, &mut input);
        TAPE.with(|t| self.g_spec.forward_taped(gp, &input, &mut t.borrow_mut()).to_vec())
    }

    fn equilibrium_map_vjp(&self, x: &[f64], u: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, gp) = self.split_params();
        let mut input = Vec::with_capacity(self.g_spec.input_dim());
        self.g_input(x, u, &mut input);
        let mut d_input = vec![0.0; input.len()];
        TAPE.with(|t| {
            let mut tape = t.borrow_mut();
            self.g_spec.forward_taped(gp, &input, &mut tape);
            self.g_spec.backward_taped(gp, &tape, cotangent, None, &mut d_input);
        });
        let dx = self.chain_features(x, &d_input);
        let du = d_input[self.state_dim * self.featurizer.len()..].to_vec();
        (dx, du)
    }
}

impl StructuredField {
    /// Pull a gradient over g's feature inputs back onto the raw state.
    fn chain_features(&self, x: &[f64], d_input: &[f64]) -> Vec<f64> {
        let m = self.featurizer.len();
        x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                self.featurizer
                    .derivative(xi)
                    .iter()
                    .zip(&d_input[i * m..(i + 1) * m])
                    .map(|(d, g)| d * g)
                    .sum()
            })
            .collect()
    }
}

impl ParametricField for StructuredField {
    type Tape = FieldTape;

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    fn field_taped(&self, x: &[f64], u: &[f64], tape: &mut FieldTape, out: &mut [f64]) {
        let (fp, gp) = self.split_params();
        tape.x.clear();
        tape.x.extend_from_slice(x);
        tape.f.clear();
        tape.f.extend_from_slice(self.f_spec.forward_taped(fp, x, &mut tape.f_tape));
        let mut input = std::mem::take(&mut tape.g_input);
        self.g_input(x, u, &mut input);
        tape.g.clear();
        tape.g.extend_from_slice(self.g_spec.forward_taped(gp, &input, &mut tape.g_tape));
        tape.g_input = input;
        for i in 0..self.state_dim {
            out[i] = tape.f[i] * (x[i] - tape.g[i]);
        }
    }

    fn field_vjp(&self, tape: &FieldTape, cotangent: &[f64], param_grad: &mut [f64], state_grad: &mut [f64]) {
        let d = self.state_dim;
        let (fp, gp) = self.split_params();
        let (gf, gg) = param_grad.split_at_mut(fp.len());
        let cot_f: Vec<f64> = (0..d).map(|i| cotangent[i] * (tape.x[i] - tape.g[i])).collect();
        let cot_g: Vec<f64> = (0..d).map(|i| -cotangent[i] * tape.f[i]).collect();
        let mut dx_f = vec![0.0; d];
        self.f_spec.backward_taped(fp, &tape.f_tape, &cot_f, Some(gf), &mut dx_f);
        let mut d_input = vec![0.0; tape.g_input.len()];
        self.g_spec.backward_taped(gp, &tape.g_tape, &cot_g, Some(gg), &mut d_input);
        let dx_g = self.chain_features(&tape.x, &d_input);
        for i in 0..d {
            state_grad[i] = cotangent[i] * tape.f[i] + dx_f[i] + dx_g[i];
        }
    }
}

/// JSON bundle: two network checkpoints plus featurizer, dimensions and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCheckpoint {
    pub state_dim: usize,
    pub control_dim: usize,
    pub featurizer: Featurizer,
    pub domain: DomainBox,
    pub f: MlpCheckpoint,
    pub g: MlpCheckpoint,
}

/// Convenience constructor for [`OutputBounds`] in recipes and tests.
pub fn bounds(lo: f64, hi: f64) -> OutputBounds {
    OutputBounds { lo, hi }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_field(featurized: bool) -> StructuredField {
        let feat = if featurized {
            Featurizer::new(-1.5, 1.5, 4).unwrap()
        } else {
            Featurizer::disabled()
        };
        let g_in = feat.len() + 1;
        StructuredField::new(
            1,
            1,
            feat,
            MlpSpec::new(vec![1, 4, 1], bounds(-1.0, 0.0)).unwrap(),
            MlpSpec::new(vec![g_in, 4, 1], bounds(0.0, 1.0)).unwrap(),
            DomainBox::cube(1, -2.0, 2.0),
        )
        .unwrap()
    }

    #[test]
    fn featurize_endpoints() {
        let f = Featurizer::new(-1.5, 1.5, 4).unwrap();
        let at_a = f.featurize(-1.5);
        assert_eq!(at_a, vec![-1.5, 1.0, 1.0, 1.0, 1.0]);
        let at_b = f.featurize(1.5);
        let expect = [1.5, -1.0, 1.0, -1.0, 1.0];
        for (v, e) in at_b.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        let mid = f.featurize(0.0);
        for (v, e) in mid.iter().zip([0.0, 0.0, 1.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        assert!(Featurizer::new(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn feature_derivative_matches_differences() {
        let f = Featurizer::new(-1.0, 1.5, 4).unwrap();
        for &x in &[-0.7, 0.1, 3.3, 9.0] {
            let d = f.derivative(x);
            let (p, m) = (f.featurize(x + 1e-6), f.featurize(x - 1e-6));
            for k in 0..5 {
                let fd = (p[k] - m[k]) / 2e-6;
                assert!((fd - d[k]).abs() < 1e-6 * (1.0 + d[k].abs()));
            }
        }
    }

    #[test]
    fn zero_parameters_give_midpoints() {
        let field = zero_field(true);
        assert_eq!(field.eval_f(&[0.7]).unwrap(), vec![-0.5]);
        assert_eq!(field.eval_g(&[0.7], &[3.0]).unwrap(), vec![0.5]);
        let big = field.eval_field(&[1.5], &[0.0]).unwrap();
        assert!((big[0] + 0.5).abs() < 1e-15);
        assert_eq!(field.eval_field(&[0.5], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(field.eval_residual(&[0.5], &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_checks() {
        let field = zero_field(false);
        assert!(field.eval_f(&[0.0, 1.0]).is_err());
        assert!(field.eval_g(&[0.0], &[]).is_err());
        let err = StructuredField::new(
            1,
            1,
            Featurizer::new(-1.5, 1.5, 4).unwrap(),
            MlpSpec::new(vec![1, 4, 1], bounds(-1.0, -0.1)).unwrap(),
            MlpSpec::new(vec![2, 4, 1], bounds(0.0, 1.0)).unwrap(),
            DomainBox::cube(1, -2.0, 2.0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn non_negative_decay_rejected() {
        let r = StructuredField::new(
            1,
            0,
            Featurizer::disabled(),
            MlpSpec::new(vec![1, 1], bounds(-1.0, 0.5)).unwrap(),
            MlpSpec::new(vec![1, 1], bounds(0.0, 1.0)).unwrap(),
            DomainBox::cube(1, 0.0, 1.0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn sign_pulls_toward_target() {
        let field = zero_field(false).init(3, 4);
        for &x in &[-1.9, -0.3, 0.2, 1.7] {
            let g = field.eval_g(&[x], &[0.2]).unwrap()[0];
            let fx = field.eval_field(&[x], &[0.2]).unwrap()[0];
            assert_eq!(fx > 0.0, x < g);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let field = zero_field(true).init(5, 6);
        let json = serde_json::to_string(&field.to_checkpoint()).unwrap();
        let back = StructuredField::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, field);
    }
}
