//! Symmetric groups `S_k` and their word problem.
//!
//! Elements are permutations of `0..k` indexed in lexicographic order. A
//! sequence of tokens `g_1, g_2, ...` is labelled with its running product
//! `g_1 ∘ g_2 ∘ ... ∘ g_t`, where `(a ∘ b)(i) = a(b(i))`.

use itertools::Itertools;
use m2rnn_core::SeededRng;

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTable {
    pub k: usize,
    /// All `k!` permutations in lexicographic order.
    pub elements: Vec<Vec<usize>>,
    /// `table[a][b]` is the index of `a ∘ b`.
    pub table: Vec<Vec<usize>>,
}

impl GroupTable {
    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }
}

pub fn compose_perm(a: &[usize], b: &[usize]) -> Vec<usize> {
    b.iter().map(|&i| a[i]).collect()
}

/// Lexicographic rank of a permutation via its Lehmer code.
pub fn perm_rank(p: &[usize]) -> usize {
    let k = p.len();
    (0..k).fold(0, |rank, i| {
        let smaller_later = p[i + 1..].iter().filter(|&&x| x < p[i]).count();
        rank * (k - i) + smaller_later
    })
}

pub fn sk_group_table(k: usize) -> Result<GroupTable> {
    if !(2..=5).contains(&k) {
        return Err(TrainError::Config(format!("S_k needs k in 2..=5, got {k}")));
    }
    let elements: Vec<Vec<usize>> = (0..k).permutations(k).collect();
    let index: std::collections::HashMap<&[usize], usize> =
        elements.iter().enumerate().map(|(i, p)| (p.as_slice(), i)).collect();
    let table = elements
        .iter()
        .map(|a| elements.iter().map(|b| index[compose_perm(a, b).as_slice()]).collect())
        .collect();
    Ok(GroupTable { k, elements, table })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSample {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Running products under the table.
pub fn running_products(g: &GroupTable, tokens: &[usize]) -> Vec<usize> {
    let mut acc = g.identity();
    tokens
        .iter()
        .map(|&t| {
            acc = g.compose(acc, t);
            acc
        })
        .collect()
}

/// Running products by composing permutation arrays and ranking them, without the table.
pub fn running_products_by_arrays(k: usize, tokens: &[usize], elements: &[Vec<usize>]) -> Vec<usize> {
    let mut acc: Vec<usize> = (0..k).collect();
    tokens
        .iter()
        .map(|&t| {
            acc = compose_perm(&acc, &elements[t]);
            perm_rank(&acc)
        })
        .collect()
}

/// `count` samples with tokens uniform over all `k!` elements.
pub fn gen_sk_sequences(g: &GroupTable, length: usize, count: usize, seed: u64) -> Vec<GroupSample> {
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| {
            let tokens: Vec<usize> = (0..length).map(|_| rng.index(g.order())).collect();
            let labels = running_products(g, &tokens);
            GroupSample { tokens, labels }
        })
        .collect()
}
