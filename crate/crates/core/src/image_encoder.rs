//! Image sub-encoder: linear projection of the 49x512 grid features into
//! the shared hidden size.

use alloc::format;

use crate::data::{GRID_REGIONS, REGION_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, Real, Tensor, Var};

/// `H_I = raw * W + b`, with the bias broadcast over regions.
pub fn project_image<F: Real>(g: &mut Graph<F>, bound: &Bound, raw: &Tensor<F>) -> Result<Var> {
    if raw.shape != [GRID_REGIONS, REGION_DIM] {
        return Err(Error::Shape {
            primitive: "project_image",
            detail: format!("expected [{GRID_REGIONS}, {REGION_DIM}], got {:?}", raw.shape),
        });
    }
    if !raw.all_finite() {
        return Err(Error::Numeric("non-finite image features".into()));
    }
    let x = g.leaf(raw.clone());
    let projected = g.matmul(x, bound.var("img.w"))?;
    g.add_row_broadcast(projected, bound.var("img.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Params;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(d1: usize, w: f64, b: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert("img.w", Tensor::full(&[REGION_DIM, d1], w));
        p.insert("img.b", Tensor::full(&[d1], b));
        p
    }

    fn random_raw(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..GRID_REGIONS * REGION_DIM)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::matrix(GRID_REGIONS, REGION_DIM, data).unwrap()
    }

    #[test]
    fn zero_weight_gives_bias_rows() {
        let p = params(4, 0.0, 0.25);
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random_raw(&mut rng);
        let h = project_image(&mut g, &bound, &raw).unwrap();
        assert!(g.value(h).data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let p = params(4, 0.3, 0.0);
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let raw = Tensor::zeros(&[GRID_REGIONS, REGION_DIM]);
        let h = project_image(&mut g, &bound, &raw).unwrap();
        assert!(g.value(h).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_triple_loop_matmul_oracle() {
        let d1 = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let raw = random_raw(&mut rng);
        let mut p = Params::new();
        p.insert(
            "img.w",
            Tensor::uniform(&[REGION_DIM, d1], -0.2, 0.2, &mut rng),
        );
        p.insert("img.b", Tensor::uniform(&[d1], -0.2, 0.2, &mut rng));

        let mut g = Graph::new();
        let bound = g.bind(&p);
        let h = project_image(&mut g, &bound, &raw).unwrap();

        // Independent naive oracle.
        let w = p.get("img.w");
        let b = p.get("img.b");
        for r in 0..GRID_REGIONS {
            for c in 0..d1 {
                let mut acc = 0.0;
                for k in 0..REGION_DIM {
                    acc += raw.at2(r, k) * w.at2(k, c);
                }
                acc += b.data[c];
                let got = g.value(h).at2(r, c);
                assert!((got - acc).abs() < 1e-12, "({r},{c}): {got} vs {acc}");
            }
        }
        assert_eq!(g.value(h).shape, vec![GRID_REGIONS, d1]);
    }

    #[test]
    fn projection_is_linear_with_zero_bias() {
        let d1 = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Params::new();
        p.insert(
            "img.w",
            Tensor::uniform(&[REGION_DIM, d1], -0.2, 0.2, &mut rng),
        );
        p.insert("img.b", Tensor::zeros(&[d1]));
        let x = random_raw(&mut rng);
        let y = random_raw(&mut rng);
        let (a, b) = (0.7, -1.3);

        let project = |raw: &Tensor<f64>| {
            let mut g = Graph::new();
            let bound = g.bind(&p);
            let h = project_image(&mut g, &bound, raw).unwrap();
            g.value(h).data.clone()
        };
        let combo = Tensor::matrix(
            GRID_REGIONS,
            REGION_DIM,
            x.data
                .iter()
                .zip(&y.data)
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let lhs = project(&combo);
        let px = project(&x);
        let py = project(&y);
        for i in 0..lhs.len() {
            let rhs = a * px[i] + b * py[i];
            assert!((lhs[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_wrong_shape_and_nonfinite() {
        let p = params(4, 0.1, 0.0);
        let mut g = Graph::new();
        let bound = g.bind(&p);
        let bad_shape = Tensor::zeros(&[48, REGION_DIM]);
        assert!(matches!(
            project_image(&mut g, &bound, &bad_shape),
            Err(Error::Shape { .. })
        ));
        let mut bad_vals = Tensor::zeros(&[GRID_REGIONS, REGION_DIM]);
        bad_vals.data[17] = f64::NAN;
        assert!(matches!(
            project_image(&mut g, &bound, &bad_vals),
            Err(Error::Numeric(_))
        ));
    }
}
