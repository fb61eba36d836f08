// SPDX-License-Identifier: MIT OR Apache-2.0

// OV decompositions checked against nalgebra, used here only as an oracle.

use factlab_core::model::{Checkpoint, Model, ModelConfig, TensorId};
use factlab_core::ovsvd::{
    decode_head, head_svd, orthonormality_error, ov_matrix, reconstruction_error, svd_ov, DecodeSide,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64, n_heads: usize, d_model: usize) -> Checkpoint {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads,
        d_model,
        vocab_size: 29,
        max_context: 8,
        mlp_multiple: 4,
    };
    let mut m = Model::<f32>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in m.data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    m
}

/// W_V^h W_O^h assembled directly from the raw tensors.
fn oracle_ov(m: &Checkpoint, layer: usize, head: usize) -> DMatrix<f64> {
    let c = m.config();
    let (d, dh) = (c.d_model, c.d_model / c.n_heads);
    let wv = m.get(TensorId::Wv(layer));
    let wo = m.get(TensorId::Wo(layer));
    let a = DMatrix::from_fn(d, dh, |i, j| wv[i * d + head * dh + j] as f64);
    let b = DMatrix::from_fn(dh, d, |i, j| wo[(head * dh + i) * d + j] as f64);
    a * b
}

/// Singular values from the eigenvalues of `M^T M`, largest first.
fn oracle_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.transpose() * m);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn ov_matrix_matches_raw_tensors() {
    let m = random_model(1, 4, 24);
    for (l, h) in [(0, 0), (0, 3), (1, 2)] {
        let ours = ov_matrix(&m, l, h).unwrap();
        let want = oracle_ov(&m, l, h);
        for i in 0..24 {
            for j in 0..24 {
                assert!((ours.at(i, j) - want[(i, j)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn singular_values_match_eigen_oracle() {
    for seed in 0..4 {
        let m = random_model(seed, 4, 32);
        for l in 0..2 {
            for h in 0..4 {
                let dec = head_svd(&m, l, h).unwrap();
                let want = oracle_singular_values(&oracle_ov(&m, l, h));
                assert_eq!(dec.s.len(), 8, "thin decomposition keeps d_head values");
                for (k, (&got, &exp)) in dec.s.iter().zip(&want).enumerate() {
                    assert!(
                        (got - exp).abs() <= 1e-4 * exp.max(1.0),
                        "seed {seed} head {l}.{h} sigma {k}: {got} vs {exp}"
                    );
                }
            }
        }
    }
}

#[test]
fn rank_is_bounded_by_head_width() {
    let m = random_model(7, 4, 32);
    let want = oracle_singular_values(&oracle_ov(&m, 1, 1));
    let top = want[0];
    assert!(want[7] > 1e-6 * top, "random factors should be full rank");
    for &s in &want[8..] {
        assert!(s < 1e-6 * top, "OV rank exceeds d_head: {s}");
    }
    let dense = svd_ov(&ov_matrix(&m, 1, 1).unwrap(), 8).unwrap();
    let factored = head_svd(&m, 1, 1).unwrap();
    for (a, b) in dense.s.iter().zip(&factored.s) {
        assert!((a - b).abs() <= 1e-8 * top);
    }
}

#[test]
fn vectors_are_orthonormal_and_reconstruct() {
    let m = random_model(3, 2, 20);
    for l in 0..2 {
        for h in 0..2 {
            let dec = head_svd(&m, l, h).unwrap();
            assert!(orthonormality_error(&dec.u) < 1e-9);
            assert!(orthonormality_error(&dec.v) < 1e-9);
            assert!(reconstruction_error(&ov_matrix(&m, l, h).unwrap(), &dec) < 1e-9);
            assert!(dec.s.windows(2).all(|w| w[1] <= w[0]));
            // u_k and v_k pair up: OV^T u_k = s_k v_k.
            let ov = oracle_ov(&m, l, h);
            for k in 0..dec.s.len() {
                let u = DMatrix::from_column_slice(20, 1, &dec.u[k]);
                let got = ov.transpose() * u;
                for j in 0..20 {
                    assert!((got[(j, 0)] - dec.s[k] * dec.v[k][j]).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn decoded_tokens_follow_unembedding_projection() {
    let m = random_model(5, 2, 16);
    let dec = head_svd(&m, 0, 1).unwrap();
    let top = decode_head(&m, &dec, 5, 3, DecodeSide::Output).unwrap();
    assert_eq!(top.len(), 3);
    let un = m.get(TensorId::Unembed);
    let w = DMatrix::from_fn(16, 29, |i, j| un[i * 29 + j] as f64);
    for (k, d) in top.iter().enumerate() {
        let v = DMatrix::from_row_slice(1, 16, &dec.v[k]);
        let scores = v * &w;
        let mut order: Vec<usize> = (0..29).collect();
        order.sort_by(|&a, &b| scores[(0, b)].total_cmp(&scores[(0, a)]).then(a.cmp(&b)));
        let ids: Vec<u32> = d.top.iter().map(|t| t.0).collect();
        assert_eq!(ids, order[..5].iter().map(|&i| i as u32).collect::<Vec<_>>());
    }
}
