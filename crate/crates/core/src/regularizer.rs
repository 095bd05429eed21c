//! Nuclear-norm maximization over the stacked adapter down-projections.

use crate::error::{Error, Result};
use crate::linalg::{nuclear_norm, nuclear_norm_subgradient, Matrix};
use crate::policy::{AdapterEnsemble, AdapterParams};

/// `W_ℓ`: the `K` down-projections of one layer stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedProjection {
    pub layer: usize,
    pub block_rows: usize,
    pub matrix: Matrix,
}

impl StackedProjection {
    pub fn blocks(&self) -> Vec<Matrix> {
        (0..self.matrix.rows() / self.block_rows)
            .map(|k| self.matrix.row_block(k * self.block_rows, self.block_rows))
            .collect()
    }
}

pub fn stack_blocks(ens: &AdapterEnsemble, layer: usize) -> Result<StackedProjection> {
    if layer >= ens.arch().tracked_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} tracked layers",
            ens.arch().tracked_layers
        )));
    }
    let matrix = Matrix::vstack(ens.adapters().iter().map(|a| &a.layers[layer].a))?;
    Ok(StackedProjection {
        layer,
        block_rows: ens.arch().adapter_rank,
        matrix,
    })
}

/// `‖[A₁; …; A_K]‖_*` for an arbitrary list of equally shaped blocks.
pub fn stacked_nuclear_norm(blocks: &[Matrix]) -> Result<f64> {
    Ok(nuclear_norm(&Matrix::vstack(blocks)?))
}

/// Subgradient of `‖[A₁; …; A_K]‖_*` sliced back per block, plus the
/// non-uniqueness flag.
pub fn stacked_subgradient(blocks: &[Matrix]) -> Result<(Vec<Matrix>, bool)> {
    let w = Matrix::vstack(blocks)?;
    let sub = nuclear_norm_subgradient(&w);
    let mut start = 0;
    let parts = blocks
        .iter()
        .map(|b| {
            let part = sub.gradient.row_block(start, b.rows());
            start += b.rows();
            part
        })
        .collect();
    Ok((parts, sub.nonunique))
}

/// `−(1/L) Σ_ℓ ‖W_ℓ‖_*`; never positive.
pub fn nnm_loss(ens: &AdapterEnsemble) -> f64 {
    let layers = ens.arch().tracked_layers;
    let total: f64 = (0..layers)
        .map(|l| {
            let w = stack_blocks(ens, l).expect("layer in range");
            nuclear_norm(&w.matrix)
        })
        .sum();
    -total / layers as f64
}

/// Per-layer nuclear norms `‖W_ℓ‖_*`.
pub fn layer_nuclear_norms(ens: &AdapterEnsemble) -> Vec<f64> {
    (0..ens.arch().tracked_layers)
        .map(|l| nuclear_norm(&stack_blocks(ens, l).expect("layer in range").matrix))
        .collect()
}

/// Gradients of `λ_NNM · L_NNM`, one [`AdapterParams`] per member; every
/// `B` entry is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NnmGradients {
    pub per_adapter: Vec<AdapterParams>,
    /// Some `W_ℓ` had repeated or vanishing singular values.
    pub nonunique: bool,
}

pub fn nnm_gradients(ens: &AdapterEnsemble, lambda_nnm: f64) -> Result<NnmGradients> {
    if !(lambda_nnm.is_finite() && lambda_nnm >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "NNM weight must be finite and non-negative, got {lambda_nnm}"
        )));
    }
    let arch = ens.arch();
    let mut per_adapter = vec![AdapterParams::zeros(arch); ens.ensemble_size()];
    let mut nonunique = false;
    if lambda_nnm == 0.0 {
        return Ok(NnmGradients {
            per_adapter,
            nonunique,
        });
    }
    let scale = -lambda_nnm / arch.tracked_layers as f64;
    for l in 0..arch.tracked_layers {
        let blocks: Vec<Matrix> = ens.adapters().iter().map(|a| a.layers[l].a.clone()).collect();
        let (parts, flag) = stacked_subgradient(&blocks)?;
        nonunique |= flag;
        for (grad, part) in per_adapter.iter_mut().zip(&parts) {
            grad.layers[l].a.add_scaled(part, scale);
        }
    }
    Ok(NnmGradients {
        per_adapter,
        nonunique,
    })
}

fn flat_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let denom = a.frobenius_norm() * b.frobenius_norm();
    if denom == 0.0 {
        return 0.0;
    }
    a.inner(b) / denom
}

/// Mean cosine similarity between flattened down-projections over all member
/// pairs and layers. Returns 1 for a single member.
pub fn mean_pairwise_block_cosine(ens: &AdapterEnsemble) -> f64 {
    let k = ens.ensemble_size();
    if k < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for l in 0..ens.arch().tracked_layers {
        for i in 0..k {
            for j in i + 1..k {
                total += flat_cosine(&ens.adapter(i).layers[l].a, &ens.adapter(j).layers[l].a);
                count += 1;
            }
        }
    }
    total / count as f64
}

/// `‖A_i A_jᵀ‖_F`: zero when the two row spaces are orthogonal.
pub fn block_overlap(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.matmul(&b.transpose())?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::policy::{init_ensemble, AdapterInit, PolicyArchitecture};

    fn arch(k: usize, r: usize, l: usize) -> PolicyArchitecture {
        PolicyArchitecture {
            ensemble_size: k,
            adapter_rank: r,
            tracked_layers: l,
            ..PolicyArchitecture::default()
        }
    }

    #[test]
    fn single_member_stack_is_the_block() {
        let ens = init_ensemble(&arch(1, 4, 2), 1, AdapterInit::Independent).unwrap();
        let w = stack_blocks(&ens, 1).unwrap();
        assert_eq!(w.matrix, ens.adapter(0).layers[1].a);
        assert!(stack_blocks(&ens, 2).is_err());
    }

    #[test]
    fn stacking_round_trips() {
        let ens = init_ensemble(&arch(5, 4, 2), 2, AdapterInit::Independent).unwrap();
        let w = stack_blocks(&ens, 0).unwrap();
        for (k, block) in w.blocks().iter().enumerate() {
            assert_eq!(block, &ens.adapter(k).layers[0].a);
        }
    }

    #[test]
    fn tied_stack_has_rank_at_most_r() {
        let ens = init_ensemble(&arch(5, 4, 1), 3, AdapterInit::Shared).unwrap();
        let w = stack_blocks(&ens, 0).unwrap();
        let s = svd(&w.matrix).singular_values;
        assert!(s[4] <= 1e-10 * s[0]);
    }

    #[test]
    fn zero_adapters_have_zero_loss() {
        let mut ens = init_ensemble(&arch(3, 2, 2), 4, AdapterInit::Independent).unwrap();
        for k in 0..3 {
            ens.adapter_mut(k).set_zero();
        }
        assert_eq!(nnm_loss(&ens), 0.0);
    }

    #[test]
    fn orthogonal_unit_blocks() {
        let mut ens = init_ensemble(&arch(2, 1, 1), 5, AdapterInit::Independent).unwrap();
        for k in 0..2 {
            let a = &mut ens.adapter_mut(k).layers[0].a;
            a.fill(0.0);
            a[(0, k)] = 1.0;
        }
        assert!((nnm_loss(&ens) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn tied_beats_orthogonal_in_loss() {
        let mut tied = init_ensemble(&arch(2, 1, 1), 6, AdapterInit::Shared).unwrap();
        let mut ortho = tied.clone();
        for k in 0..2 {
            let a = &mut tied.adapter_mut(k).layers[0].a;
            a.fill(0.0);
            a[(0, 0)] = 1.0;
            let b = &mut ortho.adapter_mut(k).layers[0].a;
            b.fill(0.0);
            b[(0, k)] = 1.0;
        }
        assert!(nnm_loss(&tied) > nnm_loss(&ortho));
    }

    #[test]
    fn gradients_leave_b_untouched_and_vanish_at_zero_weight() {
        let ens = init_ensemble(&arch(5, 4, 2), 7, AdapterInit::Independent).unwrap();
        let g = nnm_gradients(&ens, 0.3).unwrap();
        for p in &g.per_adapter {
            for l in &p.layers {
                assert!(l.b.is_zero());
                assert!(!l.a.is_zero());
            }
        }
        let z = nnm_gradients(&ens, 0.0).unwrap();
        assert!(z.per_adapter.iter().all(AdapterParams::is_zero));
    }

    #[test]
    fn cosine_of_tied_members_is_one() {
        let ens = init_ensemble(&arch(3, 2, 2), 8, AdapterInit::Shared).unwrap();
        assert!((mean_pairwise_block_cosine(&ens) - 1.0).abs() < 1e-12);
    }
}
