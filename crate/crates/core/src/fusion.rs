//! Cross-modal fusion through the outer-product space: every coordinate pair
//! of the XML and DEX embeddings contributes one pairwise product, and a
//! learnable rank-R factor bank compresses that matrix to a compact vector
//! without ever materializing it.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{svd_truncated, Binder, ParamId, Params, Tape, Tensor, TensorError, Var};

/// Guard for the normalization denominator on (near-)zero embeddings.
pub const NORM_EPSILON: f64 = 1e-12;

/// The materialized, Frobenius-normalized outer product. Diagnostic only;
/// training uses [`FactorBank::factorize`].
#[derive(Debug, Clone)]
pub struct OpsMatrix {
    /// `rows` indexed by XML dimensions (h), `cols` by DEX dimensions (l).
    pub matrix: Tensor,
    /// Pre-normalization Frobenius norm; zero when both inputs are zero.
    pub norm: f64,
}

impl OpsMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn entry_count(&self) -> usize {
        self.matrix.len()
    }
}

/// Outer product of the two embeddings divided by its Frobenius norm.
/// All-zero input yields the zero matrix with norm 0 (no division).
pub fn ops_matrix(z_xml: &[f64], z_dex: &[f64]) -> OpsMatrix {
    let (h, l) = (z_xml.len(), z_dex.len());
    let mut raw = vec![0.0; h * l];
    for i in 0..h {
        for j in 0..l {
            raw[i * l + j] = z_xml[i] * z_dex[j];
        }
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in raw.iter_mut() {
            *v /= norm;
        }
    }
    OpsMatrix {
        matrix: Tensor::matrix(h, l, raw),
        norm,
    }
}

/// Learnable rank-R bilinear compression. Output coordinate `kk` is
/// `sum_r (u[kk,r] . z_xml) * (v[kk,r] . z_dex) / nu`, which equals the sum
/// of Frobenius inner products of the normalized outer product against the
/// rank-one matrices `u v^T`.
///
/// Stored row-major per rank: `u_mats[r]` is `[h_out, h]`, `v_mats[r]` is
/// `[h_out, l]`, so each output coordinate owns R factor pairs.
#[derive(Debug, Clone)]
pub struct FactorBank {
    u_mats: Vec<ParamId>,
    v_mats: Vec<ParamId>,
    rank: usize,
    xml_len: usize,
    dex_len: usize,
    out_len: usize,
}

impl FactorBank {
    pub fn init(
        xml_len: usize,
        dex_len: usize,
        rank: usize,
        name: &str,
        params: &mut Params,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(rank >= 1, "factorization rank must be at least 1");
        let out_len = xml_len;
        // Calibrated so the fused embedding starts at the same working
        // magnitude as the raw branch embeddings: each coordinate is a sum
        // of R products of two dots against unit directions, so with bound
        // s the coordinate variance is R*(s^2/3)^2, and the norm target N
        // gives s = sqrt(3) * (N^2 / (R * out))^(1/4).
        let target_norm_sq = 6.25;
        let scale = 3f64.sqrt() * (target_norm_sq / (rank * out_len) as f64).powf(0.25);
        let (u_scale, v_scale) = (scale, scale);
        let u_mats = (0..rank)
            .map(|r| {
                params.add(
                    format!("{name}.u{r}"),
                    Tensor::uniform(&[out_len, xml_len], u_scale, rng),
                )
            })
            .collect();
        let v_mats = (0..rank)
            .map(|r| {
                params.add(
                    format!("{name}.v{r}"),
                    Tensor::uniform(&[out_len, dex_len], v_scale, rng),
                )
            })
            .collect();
        FactorBank {
            u_mats,
            v_mats,
            rank,
            xml_len,
            dex_len,
            out_len,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn output_len(&self) -> usize {
        self.out_len
    }

    /// Fused embedding of length h, scale-invariant in each input.
    pub fn factorize(
        &self,
        tape: &mut Tape,
        params: &Params,
        binder: &mut Binder,
        z_xml: Var,
        z_dex: Var,
    ) -> Result<Var, TensorError> {
        let (hx, ld) = (tape.value(z_xml).len(), tape.value(z_dex).len());
        if hx != self.xml_len || ld != self.dex_len {
            return Err(TensorError::ShapeMismatch {
                op: "factorize",
                detail: format!(
                    "embeddings ({hx}, {ld}), bank expects ({}, {})",
                    self.xml_len, self.dex_len
                ),
            });
        }
        let norm_x = tape.l2norm(z_xml)?;
        let norm_d = tape.l2norm(z_dex)?;
        let product = tape.hadamard(norm_x, norm_d)?;
        let nu = tape.clamp_min(product, NORM_EPSILON)?;
        let inv_nu = tape.recip(nu)?;

        let mut acc: Option<Var> = None;
        for r in 0..self.rank {
            let u = binder.var(tape, params, self.u_mats[r]);
            let v = binder.var(tape, params, self.v_mats[r]);
            let ux = tape.matvec(u, z_xml)?;
            let vd = tape.matvec(v, z_dex)?;
            let term = tape.hadamard(ux, vd)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        tape.mul_by_scalar(acc.expect("rank >= 1"), inv_nu)
    }
}

/// Singular spectrum of a materialized outer-product matrix.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// Count of singular values above `1e-10` relative to the largest.
    pub numerical_rank: usize,
}

/// Diagnostic spectrum of the (normalized) outer-product matrix. A single
/// sample's matrix is rank one by construction; batch means are not.
pub fn svd_analysis(d: &OpsMatrix, rank: usize) -> Result<SpectrumReport, TensorError> {
    let svd = svd_truncated(&d.matrix, rank)?;
    let top = svd.s.first().copied().unwrap_or(0.0);
    let numerical_rank = svd
        .s
        .iter()
        .filter(|&&s| s > 1e-10 * top.max(1e-300))
        .count();
    Ok(SpectrumReport {
        singular_values: svd.s,
        numerical_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ops_matrix_small_example() {
        let d = ops_matrix(&[1.0, 2.0], &[3.0, 4.0]);
        let norm = 125.0f64.sqrt();
        assert!((d.norm - norm).abs() < 1e-12);
        let want = [3.0, 4.0, 6.0, 8.0];
        for (got, raw) in d.matrix.data().iter().zip(want) {
            assert!((got - raw / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_degenerates_cleanly() {
        let d = ops_matrix(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(d.norm, 0.0);
        assert!(d.matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frobenius_norm_factorizes_over_inputs() {
        let mut r = rng(5);
        let zx: Vec<f64> = (0..64).map(|_| r.gen::<f64>() - 0.5).collect();
        let zd: Vec<f64> = (0..64).map(|_| r.gen::<f64>() - 0.5).collect();
        let d = ops_matrix(&zx, &zd);
        let nx = zx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nd = zd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((d.norm - nx * nd).abs() < 1e-12);
    }

    #[test]
    fn paper_scale_entry_count() {
        let zx = vec![0.5; 512];
        let zd = vec![0.25; 512];
        let d = ops_matrix(&zx, &zd);
        assert_eq!(d.entry_count(), 262_144);
    }

    fn bank_with(h: usize, l: usize, rank: usize, seed: u64) -> (FactorBank, Params) {
        let mut params = Params::new();
        let mut r = rng(seed);
        let bank = FactorBank::init(h, l, rank, "fuse", &mut params, &mut r);
        (bank, params)
    }

    #[test]
    fn rank_one_all_ones_bank_matches_formula() {
        let (bank, mut params) = bank_with(3, 4, 1, 9);
        let named: Vec<(String, Tensor)> = vec![
            ("fuse.u0".into(), Tensor::new(vec![3, 3], vec![1.0; 9])),
            ("fuse.v0".into(), Tensor::new(vec![3, 4], vec![1.0; 12])),
        ];
        params.load_named(&named).unwrap();
        let zx = [0.5, -1.0, 2.0];
        let zd = [1.0, 2.0, -0.5, 0.25];
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let vx = tape.constant(Tensor::vector(zx.to_vec()));
        let vd = tape.constant(Tensor::vector(zd.to_vec()));
        let out = bank
            .factorize(&mut tape, &params, &mut binder, vx, vd)
            .unwrap();
        let nu = zx.iter().map(|v| v * v).sum::<f64>().sqrt()
            * zd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = zx.iter().sum::<f64>() * zd.iter().sum::<f64>() / nu;
        for &got in tape.value(out).data() {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_embedding_gives_zero_fusion() {
        let (bank, params) = bank_with(4, 4, 2, 10);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let zx = tape.constant(Tensor::zeros(&[4]));
        let zd = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
        let out = bank
            .factorize(&mut tape, &params, &mut binder, zx, zd)
            .unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorize_matches_materialized_inner_product_oracle() {
        let (bank, params) = bank_with(6, 5, 3, 11);
        let mut r = rng(12);
        let zx: Vec<f64> = (0..6).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();
        let zd: Vec<f64> = (0..5).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let vx = tape.constant(Tensor::vector(zx.clone()));
        let vd = tape.constant(Tensor::vector(zd.clone()));
        let out = bank
            .factorize(&mut tape, &params, &mut binder, vx, vd)
            .unwrap();

        // Oracle: materialize the normalized outer product and take explicit
        // Frobenius inner products with each rank-one factor matrix.
        let d = ops_matrix(&zx, &zd);
        let get = |name: &str| {
            params.find(name).unwrap().clone()
        };
        for kk in 0..6 {
            let mut want = 0.0;
            for rr in 0..3 {
                let u = get(&format!("fuse.u{rr}"));
                let v = get(&format!("fuse.v{rr}"));
                for i in 0..6 {
                    for j in 0..5 {
                        want += d.matrix.data()[i * 5 + j]
                            * u.data()[kk * 6 + i]
                            * v.data()[kk * 5 + j];
                    }
                }
            }
            let got = tape.value(out).data()[kk];
            assert!(
                (got - want).abs() <= 1e-10,
                "coordinate {kk}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn factorize_is_scale_invariant() {
        let (bank, params) = bank_with(5, 5, 2, 13);
        let mut r = rng(14);
        let zx: Vec<f64> = (0..5).map(|_| r.gen::<f64>() - 0.5).collect();
        let zd: Vec<f64> = (0..5).map(|_| r.gen::<f64>() - 0.5).collect();
        let run = |sx: f64, sd: f64| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let vx = tape.constant(Tensor::vector(zx.iter().map(|v| v * sx).collect()));
            let vd = tape.constant(Tensor::vector(zd.iter().map(|v| v * sd).collect()));
            let out = bank
                .factorize(&mut tape, &params, &mut binder, vx, vd)
                .unwrap();
            tape.value(out).clone()
        };
        let base = run(1.0, 1.0);
        for (a, b) in [(7.5, 1.0), (1.0, 0.003), (250.0, 0.02)] {
            let scaled = run(a, b);
            for (x, y) in base.data().iter().zip(scaled.data()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y} at scales ({a}, {b})");
            }
        }
    }

    #[test]
    fn single_sample_spectrum_is_rank_one() {
        let mut r = rng(15);
        let zx: Vec<f64> = (0..8).map(|_| r.gen::<f64>() - 0.5).collect();
        let zd: Vec<f64> = (0..8).map(|_| r.gen::<f64>() - 0.5).collect();
        let d = ops_matrix(&zx, &zd);
        let report = svd_analysis(&d, 8).unwrap();
        assert!((report.singular_values[0] - 1.0).abs() < 1e-10);
        for &s in &report.singular_values[1..] {
            assert!(s <= 1e-10);
        }
        assert_eq!(report.numerical_rank, 1);
    }

    #[test]
    fn batch_mean_spectrum_has_higher_rank() {
        let mut r = rng(16);
        let mut mean = vec![0.0; 64];
        for _ in 0..8 {
            let zx: Vec<f64> = (0..8).map(|_| r.gen::<f64>() - 0.5).collect();
            let zd: Vec<f64> = (0..8).map(|_| r.gen::<f64>() - 0.5).collect();
            let d = ops_matrix(&zx, &zd);
            for (m, v) in mean.iter_mut().zip(d.matrix.data()) {
                *m += v / 8.0;
            }
        }
        let mean_matrix = OpsMatrix {
            matrix: Tensor::matrix(8, 8, mean),
            norm: 1.0,
        };
        let report = svd_analysis(&mean_matrix, 8).unwrap();
        assert!(report.numerical_rank > 1);
    }

    #[test]
    fn zero_matrix_spectrum_is_zero() {
        let d = ops_matrix(&[0.0; 4], &[0.0; 4]);
        let report = svd_analysis(&d, 4).unwrap();
        assert!(report.singular_values.iter().all(|&s| s == 0.0));
        assert_eq!(report.numerical_rank, 0);
    }
}
