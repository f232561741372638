//! Depth ordering with instrumented comparison counts.
//!
//! Road Gaussians sit between the sorted free and sky groups without being
//! sorted themselves, so a tile's ordering costs two small sorts instead of
//! one large one.

use super::{Family, SplatPrimitive};

/// Stable top-down mergesort of `indices` by `key`, counting comparator
/// invocations. Deterministic: the count depends only on data and length.
pub fn merge_sort_by_key(indices: &mut [u32], key: &impl Fn(u32) -> f64) -> u64 {
    let n = indices.len();
    if n < 2 {
        return 0;
    }
    let mut scratch = indices.to_vec();
    let mut comparisons = 0u64;
    sort_rec(indices, &mut scratch, key, &mut comparisons);
    comparisons
}

fn sort_rec(
    data: &mut [u32],
    scratch: &mut [u32],
    key: &impl Fn(u32) -> f64,
    comparisons: &mut u64,
) {
    let n = data.len();
    if n < 2 {
        return;
    }
    let mid = n / 2;
    sort_rec(&mut data[..mid], &mut scratch[..mid], key, comparisons);
    sort_rec(&mut data[mid..], &mut scratch[mid..], key, comparisons);
    scratch[..n].copy_from_slice(data);
    let (left, right) = scratch[..n].split_at(mid);
    let (mut i, mut j) = (0usize, 0usize);
    for slot in data.iter_mut() {
        let take_left = if i < left.len() && j < right.len() {
            *comparisons += 1;
            key(left[i]) <= key(right[j]) // stable: ties keep left order
        } else {
            i < left.len()
        };
        if take_left {
            *slot = left[i];
            i += 1;
        } else {
            *slot = right[j];
            j += 1;
        }
    }
}

pub struct TileOrdering {
    pub order: Vec<u32>,
    pub comparisons: u64,
}

/// Grouped ordering of one tile's members (given in insertion order):
/// free sorted ascending by depth, road in insertion order (or sorted when
/// `sort_inliers`), sky sorted ascending — concatenated front to back.
pub fn order_grouped(
    prims: &[SplatPrimitive],
    members: &[u32],
    sort_inliers: bool,
) -> TileOrdering {
    let mut free: Vec<u32> = Vec::new();
    let mut road: Vec<u32> = Vec::new();
    let mut sky: Vec<u32> = Vec::new();
    for &m in members {
        match prims[m as usize].family {
            Family::Free => free.push(m),
            Family::Plane => road.push(m),
            Family::Sky => sky.push(m),
        }
    }
    let key = |i: u32| prims[i as usize].depth;
    let mut comparisons = merge_sort_by_key(&mut free, &key);
    if sort_inliers {
        comparisons += merge_sort_by_key(&mut road, &key);
    }
    comparisons += merge_sort_by_key(&mut sky, &key);
    let mut order = free;
    order.extend_from_slice(&road);
    order.extend_from_slice(&sky);
    TileOrdering {
        order,
        comparisons,
    }
}

/// Oracle ordering: one global depth sort over all members.
pub fn order_unified(prims: &[SplatPrimitive], members: &[u32]) -> TileOrdering {
    let mut order = members.to_vec();
    let comparisons = merge_sort_by_key(&mut order, &|i| prims[i as usize].depth);
    TileOrdering {
        order,
        comparisons,
    }
}
