use super::{dist2, Point3};

const LEAF_SIZE: usize = 8;
const EXHAUSTIVE_BELOW: usize = 32;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable nearest-neighbor structure over a point set.
///
/// A median-split k-d tree; sets with fewer than 32 points are scanned
/// exhaustively. Every query breaks distance ties by the lowest point index,
/// so results agree exactly with a brute-force scan.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// `(squared distance, index)` with lexicographic ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand(f64, usize);

impl Cand {
    fn better(self, other: Cand) -> bool {
        self.0 < other.0 || (self.0 == other.0 && self.1 < other.1)
    }
}

impl SpatialIndex {
    pub fn build(points: &[Point3]) -> Self {
        let mut idx = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if points.len() >= EXHAUSTIVE_BELOW {
            idx.build_node(0, points.len());
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn is_exhaustive(&self) -> bool {
        self.nodes.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[me] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        me
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        if self.is_exhaustive() {
            let mut best = Cand(f64::INFINITY, usize::MAX);
            for (i, p) in self.points.iter().enumerate() {
                let c = Cand(dist2(q, p), i);
                if c.better(best) {
                    best = c;
                }
            }
            return Some((best.1, best.0));
        }
        let mut best = Cand(f64::INFINITY, usize::MAX);
        self.nearest_rec(0, q, &mut best);
        Some((best.1, best.0))
    }

    fn nearest_rec(&self, node: usize, q: &Point3, best: &mut Cand) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Cand(dist2(q, &self.points[i]), i);
                    if c.better(*best) {
                        *best = c;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if d * d <= best.0 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<Cand> = Vec::with_capacity(k + 1);
        let mut offer = |c: Cand, heap: &mut Vec<Cand>| {
            if heap.len() == k && !c.better(heap[k - 1]) {
                return;
            }
            let pos = heap.iter().position(|h| c.better(*h)).unwrap_or(heap.len());
            heap.insert(pos, c);
            heap.truncate(k);
        };
        if self.is_exhaustive() {
            for (i, p) in self.points.iter().enumerate() {
                offer(Cand(dist2(q, p), i), &mut heap);
            }
        } else {
            self.knn_rec(0, q, k, &mut heap, &mut offer);
        }
        heap.into_iter().map(|c| (c.1, c.0)).collect()
    }

    fn knn_rec(
        &self,
        node: usize,
        q: &Point3,
        k: usize,
        heap: &mut Vec<Cand>,
        offer: &mut impl FnMut(Cand, &mut Vec<Cand>),
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    offer(Cand(dist2(q, &self.points[i]), i), heap);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap, offer);
                if heap.len() < k || d * d <= heap[k - 1].0 {
                    self.knn_rec(far, q, k, heap, offer);
                }
            }
        }
    }

    /// All points with squared distance strictly below `r2`, sorted by
    /// `(distance, index)`.
    pub fn within(&self, q: &Point3, r2: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.is_exhaustive() {
            for (i, p) in self.points.iter().enumerate() {
                let d = dist2(q, p);
                if d < r2 {
                    out.push((i, d));
                }
            }
        } else {
            self.within_rec(0, q, r2, &mut out);
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn within_rec(&self, node: usize, q: &Point3, r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d < r2 {
                        out.push((i, d));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.within_rec(near, q, r2, out);
                if d * d < r2 {
                    self.within_rec(far, q, r2, out);
                }
            }
        }
    }
}
