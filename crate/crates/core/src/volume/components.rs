use serde::{Deserialize, Serialize};

use super::{Region, Volume, Voxel};

/// Voxel adjacency used when grouping foreground voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [[i64; 3]] {
        const SIX: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
        static TWENTY_SIX: std::sync::OnceLock<Vec<[i64; 3]>> = std::sync::OnceLock::new();
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => TWENTY_SIX.get_or_init(|| {
                let mut v = Vec::with_capacity(26);
                for z in -1..=1 {
                    for y in -1..=1 {
                        for x in -1..=1 {
                            if (x, y, z) != (0, 0, 0) {
                                v.push([x, y, z]);
                            }
                        }
                    }
                }
                v
            }),
        }
    }

    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub centroid: [f64; 3],
    pub bbox: Region,
}

impl Component {
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    /// Largest bounding-box side in voxels.
    pub fn max_extent(&self) -> usize {
        *self.bbox.size.iter().max().unwrap_or(&0)
    }

    pub fn rounded_centroid(&self) -> [i64; 3] {
        std::array::from_fn(|a| self.centroid[a].round() as i64)
    }
}

/// Maximal connected groups of nonzero voxels, in raster order of their
/// first voxel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComponentSet {
    pub components: Vec<Component>,
    /// Per-voxel component id (1-based, 0 = background).
    pub labels: Vec<u32>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_voxels(&self) -> usize {
        self.components.iter().map(Component::voxel_count).sum()
    }
}

pub fn connected_components<T: Voxel>(m: &Volume<T>, conn: Connectivity) -> ComponentSet {
    let dims = m.dims();
    let [nx, ny, nz] = dims.map(|d| d as i64);
    let offsets = conn.offsets();
    let mut labels = vec![0u32; m.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for seed in 0..m.len() {
        if !m.data()[seed].is_set() || labels[seed] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        labels[seed] = id;
        stack.push(seed);
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let [x, y, z] = m.coords(i).map(|c| c as i64);
            for o in offsets {
                let (qx, qy, qz) = (x + o[0], y + o[1], z + o[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let j = (qx + nx * (qy + ny * qz)) as usize;
                if labels[j] == 0 && m.data()[j].is_set() {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
        voxels.sort_unstable();
        components.push(summarize(m, voxels));
    }
    ComponentSet { components, labels }
}

fn summarize<T: Voxel>(m: &Volume<T>, voxels: Vec<usize>) -> Component {
    let mut sum = [0f64; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in &voxels {
        let c = m.coords(i);
        for a in 0..3 {
            sum[a] += c[a] as f64;
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let n = voxels.len() as f64;
    Component {
        centroid: sum.map(|s| s / n),
        bbox: Region::new(lo.map(|l| l as i64), std::array::from_fn(|a| hi[a] - lo[a] + 1)),
        voxels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Mask;
    use proptest::prelude::*;

    #[test]
    fn empty_mask_has_no_components() {
        let m = Mask::zeros([5, 5, 5]);
        for c in [Connectivity::Six, Connectivity::TwentySix] {
            assert!(connected_components(&m, c).is_empty());
        }
    }

    #[test]
    fn face_neighbours_join_under_both() {
        let mut m = Mask::zeros([4, 4, 4]);
        m.set(1, 1, 1, 1);
        m.set(2, 1, 1, 1);
        for c in [Connectivity::Six, Connectivity::TwentySix] {
            assert_eq!(connected_components(&m, c).len(), 1);
        }
    }

    #[test]
    fn corner_neighbours_split_under_six() {
        let mut m = Mask::zeros([4, 4, 4]);
        m.set(1, 1, 1, 1);
        m.set(2, 2, 2, 1);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
    }

    #[test]
    fn centroid_and_bbox() {
        let mut m = Mask::zeros([6, 6, 6]);
        for x in 1..4 {
            m.set(x, 2, 5, 1);
        }
        let cs = connected_components(&m, Connectivity::Six);
        let c = &cs.components[0];
        assert_eq!(c.centroid, [2.0, 2.0, 5.0]);
        assert_eq!(c.bbox, Region::new([1, 2, 5], [3, 1, 1]));
        assert_eq!(c.max_extent(), 3);
    }

    proptest! {
        #[test]
        fn components_partition_foreground(bits in proptest::collection::vec(0u8..4, 216), six in any::<bool>()) {
            let m = Mask::from_data(crate::volume::Geometry::new([6, 6, 6]), bits.iter().map(|&b| u8::from(b == 0)).collect()).unwrap();
            let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
            let cs = connected_components(&m, conn);
            prop_assert_eq!(cs.total_voxels(), m.count_set());
            let mut seen = vec![false; m.len()];
            for c in &cs.components {
                for &i in &c.voxels {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
        }
    }
}
