use super::ParamSet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two-layer perceptron from concatenated router outputs (and, optionally,
/// final hidden states) to a predicted LM loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    /// `[P × R]` with `R = K·2N`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[1 × P]`.
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[P × C]` hidden-state projection of the dynamic variant.
    pub proj: Option<Tensor>,
}

impl SurrogateModel {
    pub fn new(input: usize, hidden: usize, hidden_state: Option<usize>, rng: &mut Rng) -> Self {
        let mut normal = |r: usize, c: usize| {
            let s = 1.0 / (c as f64).sqrt();
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal(s)).collect()).expect("shape")
        };
        let w1 = normal(hidden, input);
        let w2 = normal(1, hidden);
        let proj = hidden_state.map(|c| normal(hidden, c));
        Self {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[1]),
            proj,
        }
    }

    pub fn zeros(input: usize, hidden: usize, hidden_state: Option<usize>) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, input]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden]),
            b2: Tensor::zeros(&[1]),
            proj: hidden_state.map(|c| Tensor::zeros(&[hidden, c])),
        }
    }

    pub fn input_len(&self) -> usize {
        self.w1.cols()
    }

    /// Predictions `[B×1]` for inputs `r: [B×R]` and optional `h: [B×C]`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &[Var], r: Var, h: Option<Var>) -> Result<Var> {
        let width = tape.value(r).cols();
        if width != self.input_len() {
            return Err(Error::Length(format!(
                "surrogate expects {} inputs, got {width}",
                self.input_len()
            )));
        }
        let mut pre = tape.matmul_nt(r, vars[0])?;
        match (h, self.proj.is_some()) {
            (Some(h), true) => {
                let p = tape.matmul_nt(h, vars[4])?;
                pre = tape.add(pre, p)?;
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Param("surrogate has no hidden-state projection".into()))
            }
            (None, true) => return Err(Error::Param("surrogate needs hidden states".into())),
        }
        let pre = tape.add_row(pre, vars[1])?;
        let a = tape.gelu(pre);
        let out = tape.matmul_nt(a, vars[2])?;
        tape.add_row(out, vars[3])
    }
}

impl ParamSet for SurrogateModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w1, &self.b1, &self.w2, &self.b2];
        v.extend(self.proj.as_ref());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        v.extend(self.proj.as_mut());
        v
    }
}

/// One predicted loss per row of `r`.
pub fn surrogate_forward(sm: &SurrogateModel, r: &Tensor, h: Option<&Tensor>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = sm.params().into_iter().map(|t| tape.constant(t.clone())).collect();
    let rv = tape.constant(r.clone());
    let hv = h.map(|h| tape.constant(h.clone()));
    let out = sm.forward_on(&mut tape, &vars, rv, hv)?;
    tape.check()?;
    Ok(tape.value(out).data().to_vec())
}
