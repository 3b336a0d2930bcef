//! Half-open integer boxes in tensor coordinate space.

/// An axis-aligned box; each dimension is a half-open range `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct IBox(pub Vec<(i64, i64)>);

impl IBox {
    pub fn full(shape: &[u64]) -> Self {
        IBox(shape.iter().map(|&d| (0, d as i64)).collect())
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn extent(&self, d: usize) -> i64 {
        (self.0[d].1 - self.0[d].0).max(0)
    }

    pub fn extents(&self) -> Vec<u64> {
        (0..self.rank()).map(|d| self.extent(d) as u64).collect()
    }

    pub fn elems(&self) -> u64 {
        (0..self.rank()).map(|d| self.extent(d) as u64).product()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().any(|&(lo, hi)| hi <= lo)
    }

    pub fn intersect(&self, other: &IBox) -> IBox {
        IBox(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&(alo, ahi), &(blo, bhi))| (alo.max(blo), ahi.min(bhi)))
                .collect(),
        )
    }

    pub fn contains(&self, other: &IBox) -> bool {
        other.is_empty()
            || self
                .0
                .iter()
                .zip(&other.0)
                .all(|(&(alo, ahi), &(blo, bhi))| alo <= blo && bhi <= ahi)
    }

    pub fn contains_point(&self, p: &[i64]) -> bool {
        self.0
            .iter()
            .zip(p)
            .all(|(&(lo, hi), &x)| lo <= x && x < hi)
    }

    /// Disjoint box decomposition of `self` minus `other`.
    pub fn minus(&self, other: &IBox) -> Vec<IBox> {
        if self.is_empty() {
            return Vec::new();
        }
        let inter = self.intersect(other);
        if inter.is_empty() {
            return vec![self.clone()];
        }
        let mut out = Vec::new();
        let mut cur = self.0.clone();
        for d in 0..self.rank() {
            let (alo, ahi) = cur[d];
            let (blo, bhi) = inter.0[d];
            if alo < blo {
                let mut b = cur.clone();
                b[d] = (alo, blo);
                out.push(IBox(b));
            }
            if bhi < ahi {
                let mut b = cur.clone();
                b[d] = (bhi, ahi);
                out.push(IBox(b));
            }
            cur[d] = (blo, bhi);
        }
        out
    }

    /// Part `j` of an even `s`-way split along `dim`, with ceiling
    /// boundaries so parts always tile the range.
    pub fn slice(&self, dim: usize, part: usize, of: usize) -> IBox {
        let (lo, hi) = self.0[dim];
        let len = (hi - lo).max(0);
        let bound = |k: usize| lo + (len * k as i64 + of as i64 - 1).div_euclid(of as i64);
        let mut b = self.clone();
        b.0[dim] = (bound(part), bound(part + 1));
        b
    }

    /// Iterate all integer points, last dimension fastest.
    pub fn points(&self) -> PointIter {
        let start: Vec<i64> = self.0.iter().map(|&(lo, _)| lo).collect();
        PointIter {
            bx: self.clone(),
            cur: start,
            done: self.is_empty(),
        }
    }
}

pub struct PointIter {
    bx: IBox,
    cur: Vec<i64>,
    done: bool,
}

impl Iterator for PointIter {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        if self.done {
            return None;
        }
        let out = self.cur.clone();
        for d in (0..self.bx.rank()).rev() {
            self.cur[d] += 1;
            if self.cur[d] < self.bx.0[d].1 {
                return Some(out);
            }
            self.cur[d] = self.bx.0[d].0;
        }
        self.done = true;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minus_decomposes_disjointly() {
        let a = IBox(vec![(0, 8), (0, 8)]);
        let b = IBox(vec![(2, 5), (3, 8)]);
        let parts = a.minus(&b);
        let total: u64 = parts.iter().map(|p| p.elems()).sum();
        assert_eq!(total + a.intersect(&b).elems(), a.elems());
        for (i, p) in parts.iter().enumerate() {
            assert!(p.intersect(&b).is_empty());
            for q in &parts[i + 1..] {
                assert!(p.intersect(q).is_empty());
            }
        }
    }

    #[test]
    fn slices_tile() {
        let a = IBox(vec![(3, 10)]);
        let mut total = 0;
        for j in 0..3 {
            total += a.slice(0, j, 3).elems();
        }
        assert_eq!(total, 7);
    }
}
