//! Per-image saliency: input gradients reduced across channels, normalized,
//! and down-sampled to a patch grid.
//!
//! The saliency pass always runs on the clean batch with its plain labels,
//! before any mixing, with model parameters treated as constants.

use std::io::{self, Write};

use crate::autodiff::{grad_wrt_input_batch, one_hot, AdResult, ForwardModel, LossKind};
use crate::tensor::{avg_pool2d, Tensor, TensorError, TensorResult};

/// Which side of the down-sampling ambiguity to use.
///
/// `GridSide` (default) reads the patch parameter p as the output grid side:
/// the map is pooled with kernel W/p down to p×p. `KernelSize` is the
/// literal alternative where p is the pooling kernel, producing a
/// (W/p)×(W/p) grid. Both are kept behind this switch so their effect can be
/// measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    GridSide,
    KernelSize,
}

/// Normalized p×p saliency grid for one image. Entries are non-negative and
/// sum to 1 within 1e-6.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyGrid {
    pub grid: Tensor,
    pub source: usize,
    pub side: usize,
}

/// Channel-wise L2 reduction of an input gradient:
/// out[i][j] = sqrt( (1/C) Σ_c g[c][i][j]² ).
pub fn saliency_from_grad(grad: &Tensor) -> TensorResult<Tensor> {
    if grad.rank() != 3 {
        return Err(TensorError::RankMismatch {
            op: "saliency_from_grad",
            expected: 3,
            got: grad.rank(),
        });
    }
    let (c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let inv_c = 1.0 / c as f64;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ci in 0..c {
        let g_plane = &grad.data()[ci * plane..(ci + 1) * plane];
        for (o, g) in out.iter_mut().zip(g_plane) {
            *o += g * g;
        }
    }
    for o in &mut out {
        *o = (*o * inv_c).sqrt();
    }
    Tensor::new(vec![h, w], out)
}

/// Saliency map of one C×W×W image under the model's training loss.
pub fn saliency_map<M: ForwardModel>(
    model: &M,
    image: &Tensor,
    label: usize,
    loss: LossKind,
) -> AdResult<Tensor> {
    let maps = saliency_maps_batch(
        model,
        &image.reshape({
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            s
        })?,
        &[label],
        loss,
    )?;
    Ok(maps.into_iter().next().expect("one image in, one map out"))
}

/// Saliency maps for a whole batch in a single forward/backward pass.
///
/// The batch loss averages over images, which scales every per-image
/// gradient by the same constant; downstream normalization removes it.
pub fn saliency_maps_batch<M: ForwardModel>(
    model: &M,
    batch: &Tensor,
    labels: &[usize],
    loss: LossKind,
) -> AdResult<Vec<Tensor>> {
    let targets = one_hot(labels, model.num_classes());
    let grads = grad_wrt_input_batch(model, batch, &targets, loss)?;
    let (b, c, h, w) = (
        grads.shape()[0],
        grads.shape()[1],
        grads.shape()[2],
        grads.shape()[3],
    );
    let mut maps = Vec::with_capacity(b);
    for bi in 0..b {
        let img_grad = Tensor::new(
            vec![c, h, w],
            grads.data()[bi * c * h * w..(bi + 1) * c * h * w].to_vec(),
        )?;
        maps.push(saliency_from_grad(&img_grad)?);
    }
    Ok(maps)
}

/// Normalize a raw W×W saliency map to sum 1, pool it down to a grid, and
/// rescale so the grid sums to 1 again.
///
/// Guard: if the map's mass is below 1e-12 (degenerate early-training
/// gradients) the uniform grid is returned so downstream masks stay valid.
pub fn normalize_and_pool(phi: &Tensor, p: usize, source: usize) -> TensorResult<SaliencyGrid> {
    normalize_and_pool_with(phi, p, GridMode::GridSide, source)
}

pub fn normalize_and_pool_with(
    phi: &Tensor,
    p: usize,
    mode: GridMode,
    source: usize,
) -> TensorResult<SaliencyGrid> {
    if phi.rank() != 2 || phi.shape()[0] != phi.shape()[1] {
        return Err(TensorError::RankMismatch {
            op: "normalize_and_pool",
            expected: 2,
            got: phi.rank(),
        });
    }
    let w = phi.shape()[0];
    if p == 0 || w % p != 0 {
        return Err(TensorError::NotDivisible {
            op: "normalize_and_pool",
            extent: w,
            divisor: p,
        });
    }
    if phi.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(TensorError::NanInput("normalize_and_pool"));
    }
    let kernel = match mode {
        GridMode::GridSide => w / p,
        GridMode::KernelSize => p,
    };
    let side = w / kernel;

    let total = phi.sum();
    if total < 1e-12 {
        return Ok(SaliencyGrid {
            grid: Tensor::full(vec![side, side], 1.0 / (side * side) as f64),
            source,
            side,
        });
    }
    let normalized = phi.scale(1.0 / total);
    // Pooling divides each block sum by kernel²; scaling back makes the grid
    // a probability vector of block masses.
    let pooled = avg_pool2d(&normalized, kernel)?;
    let grid = pooled.scale((kernel * kernel) as f64);
    Ok(SaliencyGrid { grid, source, side })
}

/// Pool a batch of raw saliency maps at a common grid side.
pub fn pool_batch(maps: &[Tensor], p: usize, mode: GridMode) -> TensorResult<Vec<SaliencyGrid>> {
    maps.iter()
        .enumerate()
        .map(|(i, m)| normalize_and_pool_with(m, p, mode, i))
        .collect()
}

/// Debug dump: one CSV matrix per grid, blank-line separated.
pub fn dump_grids_csv<W: Write>(grids: &[SaliencyGrid], out: &mut W) -> io::Result<()> {
    for g in grids {
        writeln!(out, "# source={} side={}", g.source, g.side)?;
        for row in g.grid.data().chunks(g.side) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AdResult, NodeId, Tape};
    use crate::rng::Rng;

    #[test]
    fn channel_reduction_analytic_cases() {
        // single channel: phi == |g|
        let g = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let phi = saliency_from_grad(&g).unwrap();
        assert_eq!(phi.data(), &[0.5, 1.0, 2.0, 0.0]);

        // C identical channels: the 1/C cancels the channel sum, phi == |g|
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        }
        let g3 = Tensor::new(vec![3, 2, 2], data).unwrap();
        let phi3 = saliency_from_grad(&g3).unwrap();
        for (a, b) in phi3.data().iter().zip(phi.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // zero gradient: all-zero map
        let z = saliency_from_grad(&Tensor::zeros(vec![2, 3, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    struct LinearModel {
        w: Tensor, // 1×F
    }

    impl ForwardModel for LinearModel {
        fn forward_tape(&self, tape: &mut Tape, input: NodeId) -> AdResult<NodeId> {
            let b = tape.value(input).shape()[0];
            let f: usize = tape.value(input).shape()[1..].iter().product();
            let flat = tape.reshape(input, vec![b, f])?;
            let w = tape.constant(self.w.clone());
            let bias = tape.constant(Tensor::zeros(vec![1]));
            tape.linear(flat, w, bias)
        }
        fn num_classes(&self) -> usize {
            1
        }
    }

    #[test]
    fn linear_model_saliency_is_proportional_to_weights() {
        let w = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let model = LinearModel { w: w.clone() };
        let x = Tensor::new(vec![1, 2, 2], vec![0.3, 0.1, 0.9, 0.4]).unwrap();
        let phi = saliency_map(&model, &x, 0, LossKind::SigmoidBce).unwrap();
        // ∂BCE/∂x = c·w for a scalar c, so phi == |c|·|w|: ratios match |w|
        let scale = phi.data()[0] / w.data()[0].abs();
        assert!(scale > 0.0);
        for (p, wv) in phi.data().iter().zip(w.data()) {
            assert!((p - scale * wv.abs()).abs() < 1e-12, "{p} vs {}", scale * wv.abs());
        }
    }

    #[test]
    fn uniform_map_pools_to_uniform_grid() {
        let phi = Tensor::full(vec![8, 8], 0.37);
        let g = normalize_and_pool(&phi, 4, 0).unwrap();
        assert_eq!(g.side, 4);
        for &v in g.grid.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_mass_pools_to_single_cell() {
        let mut phi = Tensor::zeros(vec![8, 8]);
        // all mass in the top-left 4×4 block (p=2 → kernel 4)
        for i in 0..4 {
            for j in 0..4 {
                phi.data_mut()[i * 8 + j] = 1.0;
            }
        }
        let g = normalize_and_pool(&phi, 2, 0).unwrap();
        assert!((g.grid.data()[0] - 1.0).abs() < 1e-12);
        assert!(g.grid.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_matches_block_sum_oracle_and_sums_to_one() {
        let mut rng = Rng::from_seed(21);
        for _ in 0..50 {
            let phi = Tensor::rand_uniform(vec![16, 16], 0.0, 3.0, &mut rng);
            let p = [2usize, 4, 8][rng.below(3)];
            let g = normalize_and_pool(&phi, p, 0).unwrap();
            assert_eq!(g.grid.shape(), &[p, p]);
            assert!((g.grid.sum() - 1.0).abs() < 1e-6);
            assert!(g.grid.data().iter().all(|&v| v >= 0.0));
            // loop oracle: block sums of the normalized map
            let k = 16 / p;
            let total = phi.sum();
            for bi in 0..p {
                for bj in 0..p {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += phi.data()[(bi * k + i) * 16 + bj * k + j] / total;
                        }
                    }
                    let got = g.grid.data()[bi * p + bj];
                    assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn zero_mass_falls_back_to_uniform() {
        let g = normalize_and_pool(&Tensor::zeros(vec![8, 8]), 4, 3).unwrap();
        assert_eq!(g.source, 3);
        for &v in g.grid.data() {
            assert_eq!(v, 1.0 / 16.0);
        }
    }

    #[test]
    fn kernel_size_mode_uses_p_as_kernel() {
        let phi = Tensor::full(vec![8, 8], 1.0);
        let g = normalize_and_pool_with(&phi, 2, GridMode::KernelSize, 0).unwrap();
        assert_eq!(g.side, 4); // 8 / kernel 2
        assert_eq!(g.grid.shape(), &[4, 4]);
        assert!((g.grid.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn block_permutation_permutes_cells() {
        let mut rng = Rng::from_seed(22);
        let phi = Tensor::rand_uniform(vec![8, 8], 0.0, 1.0, &mut rng);
        let base = normalize_and_pool(&phi, 2, 0).unwrap();
        // swap the two top 4×4 blocks of phi
        let mut swapped = phi.clone();
        for i in 0..4 {
            for j in 0..4 {
                let a = i * 8 + j;
                let b = i * 8 + j + 4;
                swapped.data_mut().swap(a, b);
            }
        }
        let perm = normalize_and_pool(&swapped, 2, 0).unwrap();
        // summation order changes with the element order, so compare to 1e-12
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(perm.grid.data()[0], base.grid.data()[1]));
        assert!(close(perm.grid.data()[1], base.grid.data()[0]));
        assert!(close(perm.grid.data()[2], base.grid.data()[2]));
        assert!(close(perm.grid.data()[3], base.grid.data()[3]));
    }

    #[test]
    fn rejects_negative_saliency() {
        let phi = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        assert!(normalize_and_pool(&phi, 2, 0).is_err());
    }

    #[test]
    fn csv_dump_has_one_row_per_grid_row() {
        let g = SaliencyGrid {
            grid: Tensor::full(vec![2, 2], 0.25),
            source: 5,
            side: 2,
        };
        let mut out = Vec::new();
        dump_grids_csv(&[g], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# source=5 side=2");
        assert_eq!(lines[1], "0.250000000,0.250000000");
        assert_eq!(lines.len(), 4); // header + 2 rows + blank
    }
}
