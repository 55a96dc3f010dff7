//! Square boolean attention masks, stored dense row-major (one byte per
//! cell, so an L x L mask costs exactly L^2 bytes).

/// `allowed(q, k)` answers "may query position q attend key position k".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    side: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn new_false(side: usize) -> Self {
        BoolMask {
            side,
            bits: vec![false; side * side],
        }
    }

    /// Standard causal mask: q sees every k <= q.
    pub fn causal(side: usize) -> Self {
        Self::from_fn(side, |q, k| k <= q)
    }

    pub fn from_fn(side: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(side * side);
        for q in 0..side {
            for k in 0..side {
                bits.push(f(q, k));
            }
        }
        BoolMask { side, bits }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.side + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.side + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.side..(q + 1) * self.side]
    }

    /// Indices k with `allowed(q, k)`, ascending.
    pub fn visible_set(&self, q: usize) -> Vec<usize> {
        (0..self.side).filter(|&k| self.allowed(q, k)).collect()
    }

    pub fn count_allowed(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Grow to `side` x `side`, keeping existing cells; new rows and columns
    /// are false except the new diagonal cells.
    pub fn pad_to(&self, side: usize) -> BoolMask {
        assert!(side >= self.side, "pad_to cannot shrink a mask");
        let old = self.side;
        BoolMask::from_fn(side, |q, k| {
            if q < old && k < old {
                self.allowed(q, k)
            } else {
                q == k
            }
        })
    }
}
