use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, TensorError, Var};
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per block (all of them when the block is smaller).
    pub samples_per_block: usize,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub abs_floor: f64,
    pub seed: u64,
    /// Test hook: perturbs one analytic coordinate so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_block: 32,
            abs_floor: 1e-6,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < tol)
    }
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// for every trainable block in `store`.
///
/// `loss_fn` must build its scalar loss on the provided tape and be a pure
/// function of the parameters; two evaluations at the unperturbed point that
/// differ bitwise are reported as [`TensorError::NonDeterministic`].
pub fn finite_difference_check<S, E, F>(
    store: &mut ParamStore<S>,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport, E>
where
    S: Scalar,
    E: From<TensorError>,
    F: for<'a> FnMut(&mut Tape<'a, S>) -> Result<Var, E>,
{
    if opts.eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("step {} must be positive", opts.eps),
        }
        .into());
    }
    fn eval<S, E, F>(store: &ParamStore<S>, loss_fn: &mut F) -> Result<f64, E>
    where
        S: Scalar,
        F: for<'a> FnMut(&mut Tape<'a, S>) -> Result<Var, E>,
    {
        let mut tape = Tape::new(store);
        let l = loss_fn(&mut tape)?;
        Ok(tape.scalar_value(l).as_f64())
    }

    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss_fn(&mut tape)?;
        let v = tape.scalar_value(l).as_f64();
        let g = tape.backward(l)?;
        let again = eval(store, &mut loss_fn)?;
        if again.to_bits() != v.to_bits() {
            return Err(TensorError::NonDeterministic(v, again).into());
        }
        g.params
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(id, _, _)| id)
        .collect();
    for (bi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= opts.samples_per_block {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let grad: Vec<f64> = match analytic.get(id) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let mut worst = 0.0f64;
        for (k, &c) in coords.iter().enumerate() {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + S::lit(opts.eps);
            let fp = eval(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[c] = orig - S::lit(opts.eps);
            let fm = eval(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let mut a = grad[c];
            if opts.corrupt && bi == 0 && k == 0 {
                a += 1.0 + a.abs();
            }
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.blocks.push(BlockError {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            checked: coords.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    fn bowl() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap().trainable())
            .unwrap();
        s.add("frozen", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn quadratic_bowl_is_exact() {
        let mut s = bowl();
        let id = s.id("x").unwrap();
        let rep = finite_difference_check::<_, TensorError, _>(&mut s, &GradCheckOptions::default(), |t| {
            let x = t.param(id);
            let sq = t.mul(x, x)?;
            let w = t.scale(sq, 3.5)?;
            t.sum(w)
        })
        .unwrap();
        assert_eq!(rep.blocks.len(), 1);
        assert!(rep.worst() < 1e-8, "{rep:?}");
    }

    #[test]
    fn tanh_chain() {
        let mut s = bowl();
        let id = s.id("x").unwrap();
        let rep = finite_difference_check::<_, TensorError, _>(&mut s, &GradCheckOptions::default(), |t| {
            let x = t.param(id);
            let a = t.tanh(x)?;
            let b = t.mul(a, x)?;
            let c = t.tanh(b)?;
            t.sum(c)
        })
        .unwrap();
        assert!(rep.worst() < 1e-6, "{rep:?}");
    }

    #[test]
    fn internal_randomness_is_rejected() {
        let mut s = bowl();
        let id = s.id("x").unwrap();
        let calls = Cell::new(0u32);
        let err = finite_difference_check::<_, TensorError, _>(&mut s, &GradCheckOptions::default(), |t| {
            calls.set(calls.get() + 1);
            let x = t.param(id);
            let k = t.constant(&[1], vec![calls.get() as f64])?;
            let y = t.mul(x, k)?;
            t.sum(y)
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic(..)));
    }

    #[test]
    fn corrupt_hook_fails() {
        let mut s = bowl();
        let id = s.id("x").unwrap();
        let opts = GradCheckOptions {
            corrupt: true,
            ..Default::default()
        };
        let rep = finite_difference_check::<_, TensorError, _>(&mut s, &opts, |t| {
            let x = t.param(id);
            t.sum(x)
        })
        .unwrap();
        assert!(!rep.passed(1e-3));
    }

    #[test]
    fn parameters_restored_bitwise() {
        let mut s = bowl();
        let before = s.get(s.id("x").unwrap()).data().to_vec();
        let id = s.id("x").unwrap();
        finite_difference_check::<_, TensorError, _>(&mut s, &GradCheckOptions::default(), |t| {
            let x = t.param(id);
            let e = t.exp(x)?;
            t.sum(e)
        })
        .unwrap();
        assert_eq!(s.get(id).data(), &before[..]);
    }
}
