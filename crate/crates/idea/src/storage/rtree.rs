//! R-tree over point/rectangle entries with STR bulk loading and dynamic
//! inserts using the classic quadratic split. Probes return candidate keys
//! whose stored rectangle intersects the query box; callers always apply an
//! exact geometry recheck afterwards.

use crate::data::{KeyBytes, Point, Rect};

pub const MAX_FANOUT: usize = 16;
const MIN_FILL: usize = 6;

#[derive(Debug, Clone)]
pub struct Entry {
    pub rect: Rect,
    pub key: KeyBytes,
}

impl Entry {
    pub fn from_point(p: Point, key: KeyBytes) -> Self {
        Entry {
            rect: Rect::new(p, p),
            key,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { rect: Rect, entries: Vec<Entry> },
    Inner { rect: Rect, children: Vec<Node> },
}

impl Node {
    fn rect(&self) -> Rect {
        match self {
            Node::Leaf { rect, .. } | Node::Inner { rect, .. } => *rect,
        }
    }

    fn empty_leaf() -> Node {
        Node::Leaf {
            rect: EMPTY_RECT,
            entries: Vec::new(),
        }
    }
}

// Inverted sentinel; union with any real rect yields that rect.
const EMPTY_RECT: Rect = Rect {
    lower_left: Point {
        x: f64::INFINITY,
        y: f64::INFINITY,
    },
    upper_right: Point {
        x: f64::NEG_INFINITY,
        y: f64::NEG_INFINITY,
    },
};

fn union(a: &Rect, b: &Rect) -> Rect {
    Rect::from_coords(
        a.lower_left.x.min(b.lower_left.x),
        a.lower_left.y.min(b.lower_left.y),
        a.upper_right.x.max(b.upper_right.x),
        a.upper_right.y.max(b.upper_right.y),
    )
}

fn area(r: &Rect) -> f64 {
    if r.lower_left.x > r.upper_right.x {
        return 0.0;
    }
    (r.upper_right.x - r.lower_left.x) * (r.upper_right.y - r.lower_left.y)
}

fn enlargement(container: &Rect, added: &Rect) -> f64 {
    area(&union(container, added)) - area(container)
}

#[derive(Debug, Clone)]
pub struct RTree {
    root: Node,
    size: usize,
}

impl Default for RTree {
    fn default() -> Self {
        Self::new()
    }
}

impl RTree {
    pub fn new() -> Self {
        RTree {
            root: Node::empty_leaf(),
            size: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Sort-tile-recursive bulk load; used when an index is created over
    /// existing data.
    pub fn bulk_load(entries: Vec<Entry>) -> Self {
        let size = entries.len();
        if size == 0 {
            return RTree::new();
        }
        let mut level = str_pack(entries, |e| e.rect, |rect, chunk| Node::Leaf {
            rect,
            entries: chunk,
        });
        while level.len() > 1 {
            level = str_pack(level, |n| n.rect(), |rect, chunk| Node::Inner {
                rect,
                children: chunk,
            });
        }
        RTree {
            root: level.pop().unwrap(),
            size,
        }
    }

    pub fn insert(&mut self, entry: Entry) {
        self.size += 1;
        if let Some(sibling) = insert_rec(&mut self.root, entry) {
            let old = std::mem::replace(&mut self.root, Node::empty_leaf());
            let rect = union(&old.rect(), &sibling.rect());
            self.root = Node::Inner {
                rect,
                children: vec![old, sibling],
            };
        }
    }

    /// Collects the keys of all entries whose rectangle intersects `query`.
    pub fn search(&self, query: &Rect, out: &mut Vec<KeyBytes>) {
        search_rec(&self.root, query, out);
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        fn walk(node: &Node, is_root: bool) {
            match node {
                Node::Leaf { rect, entries } => {
                    assert!(entries.len() <= MAX_FANOUT);
                    for e in entries {
                        assert!(rect.lower_left.x <= e.rect.lower_left.x);
                        assert!(rect.upper_right.x >= e.rect.upper_right.x);
                    }
                }
                Node::Inner { rect, children } => {
                    assert!(!children.is_empty());
                    assert!(children.len() <= MAX_FANOUT);
                    if !is_root {
                        assert!(children.len() >= 2);
                    }
                    for c in children {
                        let cr = c.rect();
                        assert!(rect.lower_left.x <= cr.lower_left.x);
                        assert!(rect.upper_right.y >= cr.upper_right.y);
                        walk(c, false);
                    }
                }
            }
        }
        walk(&self.root, true);
    }
}

fn search_rec(node: &Node, query: &Rect, out: &mut Vec<KeyBytes>) {
    match node {
        Node::Leaf { rect, entries } => {
            if !rect.intersects(query) && !entries.is_empty() {
                return;
            }
            for e in entries {
                if e.rect.intersects(query) {
                    out.push(e.key.clone());
                }
            }
        }
        Node::Inner { rect, children } => {
            if !rect.intersects(query) {
                return;
            }
            for c in children {
                search_rec(c, query, out);
            }
        }
    }
}

fn insert_rec(node: &mut Node, entry: Entry) -> Option<Node> {
    match node {
        Node::Leaf { rect, entries } => {
            *rect = union(rect, &entry.rect);
            entries.push(entry);
            if entries.len() > MAX_FANOUT {
                let (r1, g1, r2, g2) = quadratic_split(std::mem::take(entries), |e| e.rect);
                *rect = r1;
                *entries = g1;
                Some(Node::Leaf {
                    rect: r2,
                    entries: g2,
                })
            } else {
                None
            }
        }
        Node::Inner { rect, children } => {
            *rect = union(rect, &entry.rect);
            let idx = choose_subtree(children, &entry.rect);
            let split = insert_rec(&mut children[idx], entry);
            if let Some(sibling) = split {
                children.push(sibling);
                if children.len() > MAX_FANOUT {
                    let (r1, g1, r2, g2) = quadratic_split(std::mem::take(children), |n| n.rect());
                    *rect = r1;
                    *children = g1;
                    return Some(Node::Inner {
                        rect: r2,
                        children: g2,
                    });
                }
            }
            None
        }
    }
}

fn choose_subtree(children: &[Node], rect: &Rect) -> usize {
    let mut best = 0;
    let mut best_enlarge = f64::INFINITY;
    let mut best_area = f64::INFINITY;
    for (i, child) in children.iter().enumerate() {
        let cr = child.rect();
        let grow = enlargement(&cr, rect);
        let a = area(&cr);
        if grow < best_enlarge || (grow == best_enlarge && a < best_area) {
            best = i;
            best_enlarge = grow;
            best_area = a;
        }
    }
    best
}

// Guttman's quadratic split: seed with the pair wasting the most area, then
// assign each remaining item to the group whose rect it enlarges least,
// honoring the minimum fill.
fn quadratic_split<T>(items: Vec<T>, rect_of: impl Fn(&T) -> Rect) -> (Rect, Vec<T>, Rect, Vec<T>) {
    debug_assert!(items.len() >= 2);
    let mut remaining: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let n = remaining.len();
    let (mut seed1, mut seed2) = (0, 1);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let ri = rect_of(remaining[i].as_ref().unwrap());
            let rj = rect_of(remaining[j].as_ref().unwrap());
            let dead = area(&union(&ri, &rj)) - area(&ri) - area(&rj);
            if dead > worst {
                worst = dead;
                seed1 = i;
                seed2 = j;
            }
        }
    }
    let s1 = remaining[seed1].take().unwrap();
    let s2 = remaining[seed2].take().unwrap();
    let mut rect1 = rect_of(&s1);
    let mut rect2 = rect_of(&s2);
    let mut group1 = vec![s1];
    let mut group2 = vec![s2];
    let mut left = n - 2;
    for slot in remaining.iter_mut() {
        let Some(item) = slot.take() else { continue };
        // force assignment when a group must take everything left to reach
        // the minimum fill
        if group1.len() + left <= MIN_FILL {
            rect1 = union(&rect1, &rect_of(&item));
            group1.push(item);
        } else if group2.len() + left <= MIN_FILL {
            rect2 = union(&rect2, &rect_of(&item));
            group2.push(item);
        } else {
            let r = rect_of(&item);
            let grow1 = enlargement(&rect1, &r);
            let grow2 = enlargement(&rect2, &r);
            let to_first = match grow1.partial_cmp(&grow2) {
                Some(std::cmp::Ordering::Less) => true,
                Some(std::cmp::Ordering::Greater) => false,
                _ => group1.len() <= group2.len(),
            };
            if to_first {
                rect1 = union(&rect1, &r);
                group1.push(item);
            } else {
                rect2 = union(&rect2, &r);
                group2.push(item);
            }
        }
        left -= 1;
    }
    (rect1, group1, rect2, group2)
}

fn str_pack<T>(
    mut items: Vec<T>,
    rect_of: impl Fn(&T) -> Rect,
    make: impl Fn(Rect, Vec<T>) -> Node,
) -> Vec<Node> {
    let center_x = |r: &Rect| (r.lower_left.x + r.upper_right.x) / 2.0;
    let center_y = |r: &Rect| (r.lower_left.y + r.upper_right.y) / 2.0;
    let pages = items.len().div_ceil(MAX_FANOUT);
    let slices = (pages as f64).sqrt().ceil() as usize;
    let per_slice = slices * MAX_FANOUT;
    items.sort_by(|a, b| {
        center_x(&rect_of(a))
            .partial_cmp(&center_x(&rect_of(b)))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut nodes = Vec::with_capacity(pages);
    let mut rest = items;
    while !rest.is_empty() {
        let take = per_slice.min(rest.len());
        let mut slice: Vec<T> = rest.drain(..take).collect();
        slice.sort_by(|a, b| {
            center_y(&rect_of(a))
                .partial_cmp(&center_y(&rect_of(b)))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        while !slice.is_empty() {
            let take = MAX_FANOUT.min(slice.len());
            let chunk: Vec<T> = slice.drain(..take).collect();
            let rect = chunk
                .iter()
                .map(&rect_of)
                .fold(EMPTY_RECT, |acc, r| union(&acc, &r));
            nodes.push(make(rect, chunk));
        }
    }
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u64) -> KeyBytes {
        KeyBytes(i.to_be_bytes().to_vec())
    }

    fn pseudo_points(n: usize) -> Vec<(Point, KeyBytes)> {
        // small multiplicative generator; deterministic and dependency-free
        let mut state = 0x2545F4914F6CDD1Du64;
        (0..n)
            .map(|i| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = ((state >> 16) % 36000) as f64 / 100.0 - 180.0;
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let y = ((state >> 16) % 18000) as f64 / 100.0 - 90.0;
                (Point::new(x, y), key(i as u64))
            })
            .collect()
    }

    fn brute(points: &[(Point, KeyBytes)], q: &Rect) -> Vec<KeyBytes> {
        let mut out: Vec<KeyBytes> = points
            .iter()
            .filter(|(p, _)| q.contains_point(p))
            .map(|(_, k)| k.clone())
            .collect();
        out.sort();
        out
    }

    #[test]
    fn dynamic_inserts_match_brute_force() {
        let points = pseudo_points(2000);
        let mut tree = RTree::new();
        for (p, k) in &points {
            tree.insert(Entry::from_point(*p, k.clone()));
        }
        tree.check_invariants();
        for q in [
            Rect::from_coords(-10.0, -10.0, 10.0, 10.0),
            Rect::from_coords(-180.0, -90.0, 180.0, 90.0),
            Rect::from_coords(50.0, 50.0, 51.0, 51.0),
            Rect::from_coords(200.0, 200.0, 201.0, 201.0),
        ] {
            let mut got = Vec::new();
            tree.search(&q, &mut got);
            got.sort();
            assert_eq!(got, brute(&points, &q));
        }
    }

    #[test]
    fn bulk_load_matches_dynamic() {
        let points = pseudo_points(1500);
        let bulk = RTree::bulk_load(
            points
                .iter()
                .map(|(p, k)| Entry::from_point(*p, k.clone()))
                .collect(),
        );
        bulk.check_invariants();
        assert_eq!(bulk.len(), points.len());
        let q = Rect::from_coords(-30.0, -30.0, 30.0, 5.0);
        let mut got = Vec::new();
        bulk.search(&q, &mut got);
        got.sort();
        assert_eq!(got, brute(&points, &q));
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let tree = RTree::new();
        let mut got = Vec::new();
        tree.search(&Rect::from_coords(-1.0, -1.0, 1.0, 1.0), &mut got);
        assert!(got.is_empty());
    }
}
