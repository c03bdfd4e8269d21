use serde_json::json;

use super::{argmax, check_budget, selection_of, ParamSet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Selection;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One perceptron per slot: budget `T̂` → `hidden` GELU units → `k` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticRouter {
    pub k: usize,
    pub hidden: usize,
    /// Four tensors per slot: `w1 [hidden×1]`, `b1 [hidden]`, `w2 [k×hidden]`, `b2 [k]`.
    pub params: Vec<Tensor>,
}

impl StaticRouter {
    /// Random first layer, zero output layer: every slot starts uniform. The
    /// wide first-layer draw lets hidden units vary across the budget range.
    pub fn new(slots: usize, k: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = Vec::with_capacity(4 * slots);
        for _ in 0..slots {
            let w1 = (0..hidden).map(|_| rng.normal(4.0)).collect();
            let b1 = (0..hidden).map(|_| rng.normal(1.0)).collect();
            params.push(Tensor::new(vec![hidden, 1], w1).expect("shape"));
            params.push(Tensor::new(vec![hidden], b1).expect("shape"));
            params.push(Tensor::zeros(&[k, hidden]));
            params.push(Tensor::zeros(&[k]));
        }
        Self { k, hidden, params }
    }

    pub fn zeros(slots: usize, k: usize, hidden: usize) -> Self {
        let mut params = Vec::with_capacity(4 * slots);
        for _ in 0..slots {
            params.push(Tensor::zeros(&[hidden, 1]));
            params.push(Tensor::zeros(&[hidden]));
            params.push(Tensor::zeros(&[k, hidden]));
            params.push(Tensor::zeros(&[k]));
        }
        Self { k, hidden, params }
    }

    pub fn slots(&self) -> usize {
        self.params.len() / 4
    }

    /// Logits `[T×k]` per slot for the budgets in `t_hat`.
    pub fn logits_on(&self, tape: &mut Tape, vars: &[Var], t_hat: &[f64]) -> Result<Vec<Var>> {
        let t = tape.constant(Tensor::new(vec![t_hat.len(), 1], t_hat.to_vec())?);
        (0..self.slots())
            .map(|s| {
                let v = &vars[4 * s..4 * s + 4];
                let pre = tape.matmul_nt(t, v[0])?;
                let pre = tape.add_row(pre, v[1])?;
                let h = tape.gelu(pre);
                let out = tape.matmul_nt(h, v[2])?;
                tape.add_row(out, v[3])
            })
            .collect()
    }

    /// Per-slot logits at one budget.
    pub fn logits(&self, t_hat: f64) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.logits_on(&mut tape, &vars, &[t_hat])?;
        tape.check()?;
        Ok(out.into_iter().map(|v| tape.value(v).data().to_vec()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "static-router",
            json!({"k": self.k, "hidden": self.hidden, "slots": self.slots()}),
        );
        for (i, p) in self.params.iter().enumerate() {
            ck.push(format!("slot{}.{}", i / 4, ["w1", "b1", "w2", "b2"][i % 4]), p.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "static-router" {
            return Err(Error::Format(format!("expected static-router, found {}", ck.kind)));
        }
        let field = |n: &str| {
            ck.meta
                .get(n)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("router manifest lacks {n}")))
        };
        let (k, hidden, slots) = (field("k")?, field("hidden")?, field("slots")?);
        let params: Vec<Tensor> = ck.tensors.iter().map(|(_, t)| t.clone()).collect();
        let fresh = Self::zeros(slots, k, hidden);
        if params.len() != fresh.params.len()
            || params.iter().zip(&fresh.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("router tensors do not match their manifest".into()));
        }
        Ok(Self { k, hidden, params })
    }
}

impl ParamSet for StaticRouter {
    fn params(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

/// Argmax of every slot's logits at budget `t_hat`. The full budget imposes
/// no constraint, so `t_hat = 1` always serves the full model.
pub fn route_static(router: &StaticRouter, t_hat: f64) -> Result<(Selection, Vec<Vec<f64>>)> {
    check_budget(t_hat)?;
    let logits = router.logits(t_hat)?;
    let choices: Vec<usize> = if t_hat >= 1.0 {
        vec![router.k - 1; logits.len()]
    } else {
        logits.iter().map(|l| argmax(l)).collect()
    };
    Ok((selection_of(&choices)?, logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_router_picks_smallest() {
        let r = StaticRouter::zeros(4, 3, 16);
        let (sel, logits) = route_static(&r, 0.5).unwrap();
        assert_eq!(sel.slots(), vec![1; 4]);
        assert!(logits.iter().all(|l| l == &vec![0.0; 3]));
    }

    #[test]
    fn full_budget_serves_full_model() {
        let r = StaticRouter::zeros(4, 3, 16);
        assert_eq!(route_static(&r, 1.0).unwrap().0.slots(), vec![3; 4]);
    }

    #[test]
    fn budget_is_checked() {
        let r = StaticRouter::zeros(2, 3, 4);
        assert!(matches!(route_static(&r, 0.0), Err(Error::Param(_))));
        assert!(matches!(route_static(&r, 1.01), Err(Error::Param(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = StaticRouter::new(4, 3, 5, &mut Rng::new(1));
        assert_eq!(StaticRouter::from_checkpoint(&r.to_checkpoint()).unwrap(), r);
    }
}
