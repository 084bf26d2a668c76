use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Graph, Tensor};
use crate::vfn::Modality;

/// Configuration probabilities `S` (`configs x M`) and the per-branch argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSelection {
    pub s: Tensor,
    pub chosen: Vec<usize>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Argmax of every column of a row-major `rows x cols` matrix.
pub fn column_argmax(s: &Tensor) -> Vec<usize> {
    let (rows, cols) = (s.shape()[0], s.shape()[1]);
    (0..cols).map(|c| argmax((0..rows).map(|r| s.data()[r * cols + c]))).collect()
}

/// Scores the configuration query `v` (length `e1 * M`) against the prototypes.
pub fn select_configurations(v: &Tensor, prototypes: &Tensor, branches: usize) -> Result<ConfigSelection> {
    let e1 = prototypes.shape()[1];
    if v.len() != e1 * branches {
        return Err(Error::shape(
            "select_configurations",
            format!("query has {} entries, expected {e1} x {branches}", v.len()),
        ));
    }
    let mut g = Graph::new();
    let q = g.constant(v.clone());
    let p = g.constant(prototypes.clone());
    let s = config_probabilities(&mut g, q, p, branches)?;
    let s = g.value(s).clone();
    let chosen = column_argmax(&s);
    Ok(ConfigSelection { s, chosen })
}

/// `softmax_axis0(p x Resh(v))`, with `Resh` filling an `e1 x M` matrix column by column.
pub(crate) fn config_probabilities(
    g: &mut Graph,
    v: crate::tensor::Var,
    prototypes: crate::tensor::Var,
    branches: usize,
) -> Result<crate::tensor::Var> {
    let e1 = g.shape(prototypes)[1];
    let cols = g.reshape(v, &[branches, e1])?;
    let resh = g.transpose(cols)?;
    let logits = g.matmul(prototypes, resh)?;
    g.softmax(logits, 0)
}

/// Most similar row of `bank` to `q`: `(index, similarity)`.
pub fn select_basis(q: &[f64], bank: &Tensor) -> Result<(usize, f64)> {
    let &[rows, n] = bank.shape() else {
        return Err(Error::shape("select_basis", format!("bank shape {:?}", bank.shape())));
    };
    if q.len() != n {
        return Err(Error::shape("select_basis", format!("query {} vs rows of {n}", q.len())));
    }
    let sims: Vec<f64> = (0..rows).map(|i| cosine(q, &bank.data()[i * n..(i + 1) * n])).collect();
    let i = argmax(sims.iter().copied());
    Ok((i, sims[i]))
}

/// Choice made by one branch of an injection block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchChoice {
    /// Index into [`super::CONFIGS`].
    pub config: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub config_prob: f64,
    pub basis: usize,
    pub basis_prob: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSelection {
    pub layer: usize,
    pub modality: Modality,
    pub branches: Vec<BranchChoice>,
}

/// Choices of every block of one compensation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub blocks: Vec<BlockSelection>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsc::init_prototypes;

    #[test]
    fn zero_query_is_uniform_and_picks_first() {
        let p = init_prototypes(1, 16).unwrap();
        let sel = select_configurations(&Tensor::zeros(&[64]), &p, 4).unwrap();
        assert!(sel.s.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(sel.chosen, vec![0; 4]);
    }

    #[test]
    fn aligned_query_selects_prototype() {
        let p = init_prototypes(2, 16).unwrap();
        // branch 1 occupies entries 16..32 of the column-major reshape
        let mut v = vec![0.0; 64];
        v[16..32].copy_from_slice(&p.data()[2 * 16..3 * 16]);
        let v: Vec<f64> = v.iter().map(|x| x * 5.0).collect();
        let sel = select_configurations(&Tensor::vector(v), &p, 4).unwrap();
        assert_eq!(sel.chosen[1], 2);
        for c in 0..4 {
            let col: f64 = (0..4).map(|r| sel.s.data()[r * 4 + c]).sum();
            assert!((col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn basis_sign_case() {
        let bank = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (i, s) = select_basis(&[0.0, 2.0, 0.0], &bank).unwrap();
        assert_eq!(i, 1);
        assert!((s - 1.0).abs() < 1e-9);
        let (i, s) = select_basis(&[0.0, -1.0, 0.0], &bank).unwrap();
        assert_eq!(i, 0);
        assert!(s.abs() < 1e-12);
        assert_eq!(select_basis(&[0.0; 3], &bank).unwrap().0, 0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = init_prototypes(1, 16).unwrap();
        assert!(select_configurations(&Tensor::zeros(&[63]), &p, 4).is_err());
    }
}
