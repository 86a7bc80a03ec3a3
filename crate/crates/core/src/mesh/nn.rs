use super::MeshError;

/// Exact nearest-neighbour index over a fixed point set.
///
/// Points are bucketed in a uniform grid and queries search cubic shells of
/// cells outward from the query cell until no unsearched cell can hold a
/// closer point. Equal distances resolve to the lowest point index, so the
/// result matches a brute-force scan exactly.
#[derive(Clone, Debug)]
pub struct NnIndex {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    cell_start: Vec<u32>,
    items: Vec<u32>,
}

/// Upper bound on grid cells per indexed point, to keep sparse sets cheap.
const MAX_CELLS_PER_POINT: f64 = 8.0;

impl NnIndex {
    pub fn build(points: &[[f64; 3]], cell_size: f64) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::EmptyTargets);
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(MeshError::InvalidCellSize(cell_size));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let mut cell = cell_size;
        let budget = MAX_CELLS_PER_POINT * points.len() as f64 + 64.0;
        let dims_for = |c: f64| [0, 1, 2].map(|k| ((hi[k] - lo[k]) / c).floor() as i64 + 1);
        let mut dims = dims_for(cell);
        while dims.iter().map(|&d| d as f64).product::<f64>() > budget {
            cell *= 1.5;
            dims = dims_for(cell);
        }
        let ncell = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0u32; ncell + 1];
        let mut cell_of = Vec::with_capacity(points.len());
        for p in points {
            let c =
                [0, 1, 2].map(|k| (((p[k] - lo[k]) / cell).floor() as i64).clamp(0, dims[k] - 1));
            let id = ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize;
            counts[id + 1] += 1;
            cell_of.push(id);
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; points.len()];
        // Ascending insertion keeps each bucket sorted by index.
        for (i, &id) in cell_of.iter().enumerate() {
            items[fill[id] as usize] = i as u32;
            fill[id] += 1;
        }
        Ok(Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cell_start: counts,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Index of the closest point.
    pub fn nearest(&self, q: [f64; 3]) -> usize {
        self.search(q, f64::INFINITY, |_| true)
            .map(|(i, _)| i)
            .expect("index is non-empty")
    }

    pub fn nearest_many(&self, queries: &[[f64; 3]]) -> Vec<usize> {
        queries.iter().map(|&q| self.nearest(q)).collect()
    }

    /// Closest point accepted by `accept` within `max_dist`, with its
    /// distance.
    pub fn nearest_filtered(
        &self,
        q: [f64; 3],
        max_dist: f64,
        accept: impl Fn(usize) -> bool,
    ) -> Option<(usize, f64)> {
        self.search(q, max_dist, accept)
    }

    fn search(
        &self,
        q: [f64; 3],
        max_dist: f64,
        accept: impl Fn(usize) -> bool,
    ) -> Option<(usize, f64)> {
        let qc = [0, 1, 2].map(|k| ((q[k] - self.origin[k]) / self.cell).floor() as i64);
        // Chebyshev distance from the query cell to the grid box.
        let r0 = (0..3)
            .map(|k| (-qc[k]).max(qc[k] - (self.dims[k] - 1)).max(0))
            .max()
            .unwrap_or(0);
        let max_d2 = max_dist * max_dist;
        let mut best: Option<(usize, f64)> = None;
        let mut r = r0;
        loop {
            let lo = [0, 1, 2].map(|k| (qc[k] - r).max(0));
            let hi = [0, 1, 2].map(|k| (qc[k] + r).min(self.dims[k] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let cheb = (x - qc[0])
                            .abs()
                            .max((y - qc[1]).abs())
                            .max((z - qc[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let id = ((z * self.dims[1] + y) * self.dims[0] + x) as usize;
                        let (s, e) = (
                            self.cell_start[id] as usize,
                            self.cell_start[id + 1] as usize,
                        );
                        for &i in &self.items[s..e] {
                            let i = i as usize;
                            let p = self.points[i];
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 > max_d2 {
                                continue;
                            }
                            let better = match best {
                                None => true,
                                Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                            };
                            if better && accept(i) {
                                best = Some((i, d2));
                            }
                        }
                    }
                }
            }
            // Every unsearched cell is at least r full cells away.
            let bound = r as f64 * self.cell;
            let covered = (0..3).all(|k| qc[k] - r <= 0 && qc[k] + r >= self.dims[k] - 1);
            if covered || bound > max_dist {
                break;
            }
            if let Some((_, bd)) = best {
                if bd < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}
