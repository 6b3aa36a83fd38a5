use super::{union_all, GridDims, Mask, MaskError, Run};
use crate::union_find::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_neighbours(n: u8) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// Unannotated connected area of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BlankRegion {
    pub mask: Mask,
    /// `(row, col)` in source coordinates, wrap-aware.
    pub centroid: (f64, f64),
}

impl BlankRegion {
    pub fn new(mask: Mask) -> Option<Self> {
        let centroid = mask.centroid()?;
        Some(Self { mask, centroid })
    }

    pub fn touches_left_border(&self) -> bool {
        self.mask.touches_left()
    }

    pub fn touches_right_border(&self) -> bool {
        self.mask.touches_right()
    }

    pub fn touches_border(&self) -> bool {
        self.touches_left_border() || self.touches_right_border()
    }

    pub fn area(&self) -> u64 {
        self.mask.area()
    }
}

/// Connected components of `mask`, ordered by their first run. Column 0 and
/// the last column are adjacent on wrapping grids.
pub fn connected_components(mask: &Mask, conn: Connectivity) -> Vec<Mask> {
    let runs = mask.runs();
    if runs.is_empty() {
        return Vec::new();
    }
    let dims = mask.dims();
    let width = dims.width;
    let reach = match conn {
        Connectivity::Four => 0,
        Connectivity::Eight => 1,
    };
    let mut uf = UnionFind::new(runs.len());

    let row_starts: Vec<usize> = {
        let mut v = vec![0];
        for i in 1..runs.len() {
            if runs[i].row != runs[i - 1].row {
                v.push(i);
            }
        }
        v.push(runs.len());
        v
    };

    for w in row_starts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        // seam join within a row: a run at column 0 meets a run ending at width
        if dims.wrap && hi - lo >= 2 && runs[lo].start == 0 && runs[hi - 1].end() == width {
            uf.union(lo, hi - 1);
        }
    }

    for pair in row_starts.windows(3) {
        let (a0, a1, b1) = (pair[0], pair[1], pair[2]);
        if runs[a1].row != runs[a0].row + 1 {
            continue;
        }
        let (upper, lower) = (&runs[a0..a1], &runs[a1..b1]);
        let mut j = 0;
        for (i, u) in upper.iter().enumerate() {
            let lo = u.start.saturating_sub(reach);
            let hi = u.end() + reach;
            while j < lower.len() && lower[j].end() <= lo {
                j += 1;
            }
            let mut k = j;
            while k < lower.len() && lower[k].start < hi {
                uf.union(a0 + i, a1 + k);
                k += 1;
            }
        }
        if dims.wrap && reach > 0 {
            // diagonal neighbours across the seam
            let u_left = upper.first().filter(|r| r.start == 0);
            let u_right = upper.last().filter(|r| r.end() == width);
            let l_left = lower.first().filter(|r| r.start == 0);
            let l_right = lower.last().filter(|r| r.end() == width);
            if u_left.is_some() && l_right.is_some() {
                uf.union(a0, b1 - 1);
            }
            if u_right.is_some() && l_left.is_some() {
                uf.union(a1 - 1, a1);
            }
        }
    }

    let mut groups: Vec<(usize, Vec<Run>)> = Vec::new();
    let mut slot = vec![usize::MAX; runs.len()];
    for (i, run) in runs.iter().enumerate() {
        let root = uf.find(i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push((i, Vec::new()));
        }
        groups[slot[root]].1.push(*run);
    }
    groups.into_iter().map(|(_, r)| Mask::from_normalized(dims, r)).collect()
}

/// Connected unannotated areas of a frame whose area is at least
/// `min_area_fraction` of the canvas, largest first. A blank stretch crossing
/// the seam of a wrapping grid is a single region.
pub fn blank_regions(
    masks: &[Mask],
    dims: GridDims,
    min_area_fraction: f64,
    conn: Connectivity,
) -> Result<Vec<BlankRegion>, MaskError> {
    let covered = union_all(masks.iter(), dims)?;
    let blank = covered.complement();
    let min_area = min_area_fraction * dims.pixels() as f64;
    let mut regions: Vec<Mask> = connected_components(&blank, conn)
        .into_iter()
        .filter(|m| m.area() as f64 >= min_area)
        .collect();
    regions.sort_by(|a, b| b.area().cmp(&a.area()).then_with(|| a.runs().cmp(b.runs())));
    Ok(regions.into_iter().filter_map(BlankRegion::new).collect())
}
