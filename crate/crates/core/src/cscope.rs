//! Decomposition plans: a nonempty manifest factor set split into ordered
//! conditioning blocks, with the remaining factors latent.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest factor count accepted by [`enumerate_plans`].
pub const MAX_ENUMERATE_K: usize = 6;

/// Ordered conditioning blocks plus latent factors. Indices are zero-based;
/// text forms are one-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DecompositionPlan {
    blocks: Vec<BTreeSet<usize>>,
    latent: BTreeSet<usize>,
    k: usize,
}

impl DecompositionPlan {
    /// Builds a plan over `k` factors; factors absent from every block are
    /// latent.
    pub fn new(blocks: Vec<BTreeSet<usize>>, k: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if blocks.is_empty() {
            return Err(Error::InvalidPlan("a plan needs at least one block".into()));
        }
        for (j, b) in blocks.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::InvalidPlan(format!("block {} is empty", j + 1)));
            }
            for &f in b {
                if f >= k {
                    return Err(Error::InvalidPlan(format!("factor {} is not declared (K = {k})", f + 1)));
                }
                if !seen.insert(f) {
                    return Err(Error::InvalidPlan(format!("factor {} appears in two blocks", f + 1)));
                }
            }
        }
        let latent = (0..k).filter(|f| !seen.contains(f)).collect();
        Ok(Self { blocks, latent, k })
    }

    pub fn from_blocks(blocks: &[&[usize]], k: usize) -> Result<Self> {
        Self::new(blocks.iter().map(|b| b.iter().copied().collect()).collect(), k)
    }

    pub fn blocks(&self) -> &[BTreeSet<usize>] {
        &self.blocks
    }

    pub fn latent(&self) -> &BTreeSet<usize> {
        &self.latent
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn manifest(&self) -> BTreeSet<usize> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// Factors in blocks `0..j`, in block order.
    pub fn prefix(&self, j: usize) -> Vec<usize> {
        self.blocks[..j].iter().flatten().copied().collect()
    }

    /// Checks the structural invariants, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidPlan("invariant m >= 1 violated: no blocks".into()));
        }
        let mut seen = BTreeSet::new();
        for b in &self.blocks {
            if b.is_empty() {
                return Err(Error::InvalidPlan("invariant violated: empty block".into()));
            }
            for &f in b {
                if f >= self.k || !seen.insert(f) {
                    return Err(Error::InvalidPlan(
                        "invariant violated: blocks must be disjoint subsets of 1..K".into(),
                    ));
                }
            }
        }
        if self.latent.iter().any(|f| seen.contains(f) || *f >= self.k) {
            return Err(Error::InvalidPlan("invariant violated: latent set overlaps blocks".into()));
        }
        if seen.len() + self.latent.len() != self.k {
            return Err(Error::InvalidPlan("invariant violated: every factor must be manifest or latent".into()));
        }
        Ok(())
    }

    /// Parses the text form, e.g. `"1|2"`, `"1,2"` or `"2"`.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let syntax = |position: usize, message: String| Error::PlanSyntax { position, message };
        let mut blocks = Vec::new();
        let mut current = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut number: Option<(usize, usize)> = None;
        let chars: Vec<char> = text.chars().collect();
        let mut expect_factor = true;
        for pos in 0..=chars.len() {
            let c = chars.get(pos).copied();
            match c {
                Some(d) if d.is_ascii_digit() => {
                    if !expect_factor && number.is_none() {
                        return Err(syntax(pos, "expected `,` or `|` between factors".into()));
                    }
                    let v = d.to_digit(10).unwrap() as usize;
                    number = Some(match number {
                        Some((start, n)) => (start, n.saturating_mul(10).saturating_add(v)),
                        None => (pos, v),
                    });
                }
                Some(' ') | Some('\t') => {
                    if let Some((start, n)) = number.take() {
                        push_factor(&mut current, &mut seen, start, n, k)?;
                        expect_factor = false;
                    }
                }
                Some(sep @ (',' | '|')) => {
                    if let Some((start, n)) = number.take() {
                        push_factor(&mut current, &mut seen, start, n, k)?;
                    } else if expect_factor {
                        return Err(syntax(pos, format!("expected a factor index before `{sep}`")));
                    }
                    if sep == '|' {
                        blocks.push(std::mem::take(&mut current));
                    }
                    expect_factor = true;
                }
                None => {
                    if let Some((start, n)) = number.take() {
                        push_factor(&mut current, &mut seen, start, n, k)?;
                    } else if expect_factor {
                        return Err(syntax(pos, "expected a factor index at end of plan".into()));
                    }
                    blocks.push(std::mem::take(&mut current));
                }
                Some(other) => return Err(syntax(pos, format!("unexpected character `{other}`"))),
            }
        }
        Self::new(blocks, k)
    }
}

fn push_factor(
    block: &mut BTreeSet<usize>,
    seen: &mut BTreeSet<usize>,
    pos: usize,
    one_based: usize,
    k: usize,
) -> Result<()> {
    if one_based == 0 || one_based > k {
        return Err(Error::PlanSyntax { position: pos, message: format!("factor {one_based} out of range 1..={k}") });
    }
    if !seen.insert(one_based - 1) {
        return Err(Error::PlanSyntax { position: pos, message: format!("factor {one_based} repeated") });
    }
    block.insert(one_based - 1);
    Ok(())
}

impl fmt::Display for DecompositionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self
            .blocks
            .iter()
            .map(|b| b.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("|");
        f.write_str(&s)
    }
}

/// Which term of a plan a label names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// `E_{B_1}...E_{B_m} Var(Y | B_1..B_m, D)`
    Leading,
    /// `E_{B_1}...E_{B_{j-1}} Var_{B_j} E(Y | B_1..B_j, D)`, zero-based `j`.
    Block(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TermLabel {
    pub kind: TermKind,
    pub text: String,
}

impl fmt::Display for TermLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn block_vars(b: &BTreeSet<usize>) -> String {
    b.iter().map(|f| format!("V{}", f + 1)).collect::<Vec<_>>().join(",")
}

/// Labels in output order: leading term, then block terms from the last
/// block down to the first.
pub fn term_labels(plan: &DecompositionPlan) -> Result<Vec<TermLabel>> {
    plan.validate()?;
    let blocks = plan.blocks();
    let m = blocks.len();
    let given = |j: usize| -> String {
        let vars: Vec<String> = blocks[..j].iter().map(block_vars).collect();
        format!("{},D", vars.join(","))
    };
    let outer = |j: usize| -> String { blocks[..j].iter().map(|b| format!("E_{{{}}}", block_vars(b))).collect() };
    let mut labels = vec![TermLabel { kind: TermKind::Leading, text: format!("{}Var(Y|{})", outer(m), given(m)) }];
    for j in (0..m).rev() {
        labels.push(TermLabel {
            kind: TermKind::Block(j),
            text: format!("{}Var_{{{}}}E(Y|{})", outer(j), block_vars(&blocks[j]), given(j + 1)),
        });
    }
    Ok(labels)
}

/// Ordered set partitions of `items` (Fubini-many).
fn ordered_partitions(items: &[usize]) -> Vec<Vec<BTreeSet<usize>>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let n = items.len();
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        let first: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| items[i]).collect();
        let rest: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| items[i]).collect();
        for tail in ordered_partitions(&rest) {
            let mut p = Vec::with_capacity(tail.len() + 1);
            p.push(first.clone());
            p.extend(tail);
            out.push(p);
        }
    }
    out
}

/// Every plan over `k` factors, in canonical order: larger manifest sets
/// first, then manifest set lexicographically, then more blocks first, then
/// block sequence lexicographically.
pub fn enumerate_plans(k: usize) -> Result<Vec<DecompositionPlan>> {
    if k == 0 || k > MAX_ENUMERATE_K {
        return Err(Error::InvalidArgument(format!("K must lie in 1..={MAX_ENUMERATE_K}, got {k}")));
    }
    let mut plans = Vec::new();
    for mask in 1u32..(1 << k) {
        let subset: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        for blocks in ordered_partitions(&subset) {
            plans.push(DecompositionPlan::new(blocks, k)?);
        }
    }
    plans.sort_by(|a, b| {
        let (ma, mb) = (a.manifest(), b.manifest());
        let sa: Vec<usize> = ma.iter().copied().collect();
        let sb: Vec<usize> = mb.iter().copied().collect();
        let ba: Vec<Vec<usize>> = a.blocks.iter().map(|x| x.iter().copied().collect()).collect();
        let bb: Vec<Vec<usize>> = b.blocks.iter().map(|x| x.iter().copied().collect()).collect();
        sb.len()
            .cmp(&sa.len())
            .then_with(|| sa.cmp(&sb))
            .then_with(|| b.blocks.len().cmp(&a.blocks.len()))
            .then_with(|| ba.cmp(&bb))
    });
    Ok(plans)
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// Ordered set partitions of a `j`-set, by
/// `F(j) = sum_{i=1..j} C(j, i) F(j - i)`, `F(0) = 1`.
pub fn fubini(j: usize) -> Option<u128> {
    let mut f: Vec<u128> = vec![1];
    for n in 1..=j {
        let mut s: u128 = 0;
        for i in 1..=n {
            s = s.checked_add(binomial(n as u128, i as u128)?.checked_mul(f[n - i])?)?;
        }
        f.push(s);
    }
    Some(f[j])
}

/// Size of the plan space: `sum_{j=1..k} C(k, j) F(j)`.
pub fn count_plans(k: usize) -> Result<u128> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let overflow = || Error::InvalidArgument(format!("plan count for K = {k} overflows u128"));
    let mut total: u128 = 0;
    for j in 1..=k {
        let term = binomial(k as u128, j as u128)
            .and_then(|c| fubini(j).and_then(|f| c.checked_mul(f)))
            .ok_or_else(overflow)?;
        total = total.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(total)
}
