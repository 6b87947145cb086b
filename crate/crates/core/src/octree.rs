//! Lossless octree coding of voxel coordinate sets.
//!
//! Nodes are visited breadth first; every internal node emits one occupancy
//! byte whose most significant bit stands for child 0, child index being
//! `4*x_bit + 2*y_bit + z_bit`. The byte sequence is optionally range coded
//! with an adaptive byte model.
//!
//! Substream layout: `u8 depth | u8 flags (bit0 = range coded) | u32 point
//! count (LE) | payload`.

use crate::entropy::range_coder::encode_bytes_adaptive;
use crate::error::{Error, Result};
use crate::voxel::VoxelCoord;

pub const FLAG_RANGE_CODED: u8 = 1;
const HEADER_LEN: usize = 6;
pub const MAX_DEPTH: u32 = 21;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OctreeStream {
    pub depth: u32,
    pub range_coded: bool,
    pub point_count: u32,
    pub payload: Vec<u8>,
}

fn morton(c: VoxelCoord, depth: u32) -> u64 {
    let mut m = 0u64;
    for b in (0..depth).rev() {
        let bit = |v: i32| ((v >> b) & 1) as u64;
        m = (m << 3) | (bit(c.x) << 2) | (bit(c.y) << 1) | bit(c.z);
    }
    m
}

fn unmorton(m: u64, depth: u32) -> VoxelCoord {
    let (mut x, mut y, mut z) = (0i32, 0i32, 0i32);
    for b in 0..depth {
        let tri = (m >> (3 * b)) & 7;
        x |= (((tri >> 2) & 1) as i32) << b;
        y |= (((tri >> 1) & 1) as i32) << b;
        z |= ((tri & 1) as i32) << b;
    }
    VoxelCoord::new(x, y, z)
}

/// Breadth-first occupancy bytes of a non-empty set inside `[0, 2^depth)^3`.
pub fn occupancy_bytes(coords: &[VoxelCoord], depth: u32) -> Result<Vec<u8>> {
    if coords.is_empty() {
        return Err(Error::contract("octree coding of an empty set"));
    }
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::contract(format!("octree depth {depth} out of 1..=21")));
    }
    let lim = 1i32 << depth;
    if let Some(c) = coords
        .iter()
        .find(|c| [c.x, c.y, c.z].iter().any(|&v| v < 0 || v >= lim))
    {
        return Err(Error::OutOfCube {
            coord: c.to_array(),
            depth,
        });
    }
    let mut keys: Vec<u64> = coords.iter().map(|&c| morton(c, depth)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut out = Vec::new();
    for level in 0..depth {
        // nodes at `level` are key prefixes; their children one level down
        let child_shift = 3 * (depth - level - 1);
        let mut i = 0;
        while i < keys.len() {
            let parent = keys[i] >> (child_shift + 3);
            let mut byte = 0u8;
            while i < keys.len() && keys[i] >> (child_shift + 3) == parent {
                let child = (keys[i] >> child_shift) & 7;
                byte |= 0x80 >> child;
                // skip the rest of this child's subtree
                let prefix = keys[i] >> child_shift;
                while i < keys.len() && keys[i] >> child_shift == prefix {
                    i += 1;
                }
            }
            out.push(byte);
        }
    }
    Ok(out)
}

/// Rebuilds the sorted coordinate set from occupancy bytes.
pub fn coords_from_occupancy(bytes: &[u8], depth: u32) -> Result<Vec<VoxelCoord>> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Corrupt(format!("octree depth {depth} out of 1..=21")));
    }
    let mut nodes: Vec<u64> = vec![0];
    let mut pos = 0;
    for _ in 0..depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &n in &nodes {
            let byte = *bytes
                .get(pos)
                .ok_or_else(|| Error::Truncated(format!("octree ends after {pos} occupancy bytes")))?;
            pos += 1;
            if byte == 0 {
                return Err(Error::Corrupt("empty octree node".into()));
            }
            for child in 0..8u64 {
                if byte & (0x80 >> child) != 0 {
                    next.push((n << 3) | child);
                }
            }
        }
        nodes = next;
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} bytes after the last octree level", bytes.len() - pos)));
    }
    let mut coords: Vec<VoxelCoord> = nodes.into_iter().map(|m| unmorton(m, depth)).collect();
    coords.sort_unstable();
    Ok(coords)
}

pub fn octree_encode(coords: &[VoxelCoord], depth: u32, range_coded: bool) -> Result<OctreeStream> {
    let occ = occupancy_bytes(coords, depth)?;
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let payload = if range_coded { encode_bytes_adaptive(&occ) } else { occ };
    Ok(OctreeStream {
        depth,
        range_coded,
        point_count: sorted.len() as u32,
        payload,
    })
}

/// Decodes a stream. The occupancy byte count is not stored, so range-coded
/// payloads are decoded level by level as the tree unfolds.
pub fn octree_decode(stream: &OctreeStream) -> Result<Vec<VoxelCoord>> {
    let coords = if stream.range_coded {
        decode_range_coded(&stream.payload, stream.depth)?
    } else {
        coords_from_occupancy(&stream.payload, stream.depth)?
    };
    if coords.len() != stream.point_count as usize {
        return Err(Error::Corrupt(format!(
            "octree holds {} points, header says {}",
            coords.len(),
            stream.point_count
        )));
    }
    Ok(coords)
}

fn decode_range_coded(payload: &[u8], depth: u32) -> Result<Vec<VoxelCoord>> {
    use crate::entropy::range_coder::{AdaptiveByteModel, RangeDecoder};
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Corrupt(format!("octree depth {depth} out of 1..=21")));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut model = AdaptiveByteModel::default();
    let mut occ = Vec::new();
    let mut nodes = 1usize;
    for _ in 0..depth {
        let mut next = 0usize;
        for _ in 0..nodes {
            let b = model.decode(&mut dec)?;
            if b == 0 {
                return Err(Error::Corrupt("empty octree node".into()));
            }
            next += b.count_ones() as usize;
            occ.push(b);
        }
        nodes = next;
    }
    dec.finish()?;
    coords_from_occupancy(&occ, depth)
}

impl OctreeStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.push(self.depth as u8);
        out.push(if self.range_coded { FLAG_RANGE_CODED } else { 0 });
        out.extend_from_slice(&self.point_count.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < HEADER_LEN {
            return Err(Error::Truncated("octree header".into()));
        }
        let flags = data[1];
        if flags & !FLAG_RANGE_CODED != 0 {
            return Err(Error::Corrupt(format!("unknown octree flags {flags:#x}")));
        }
        Ok(Self {
            depth: data[0] as u32,
            range_coded: flags & FLAG_RANGE_CODED != 0,
            point_count: u32::from_le_bytes(data[2..6].try_into().unwrap()),
            payload: data[HEADER_LEN..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: &[[i32; 3]]) -> Vec<VoxelCoord> {
        v.iter().map(|&a| a.into()).collect()
    }

    #[test]
    fn single_point_depth_nine() {
        let s = octree_encode(&c(&[[0, 0, 0]]), 9, false).unwrap();
        assert_eq!(s.payload, vec![0b1000_0000; 9]);
        assert_eq!(octree_decode(&s).unwrap(), c(&[[0, 0, 0]]));
    }

    #[test]
    fn full_unit_cube() {
        let mut all = Vec::new();
        for b in 0..8 {
            all.push([(b >> 2) & 1, (b >> 1) & 1, b & 1]);
        }
        let s = octree_encode(&c(&all), 1, false).unwrap();
        assert_eq!(s.payload, vec![0xFF]);
        assert_eq!(octree_decode(&s).unwrap().len(), 8);
    }

    #[test]
    fn child_bit_order() {
        // x bit is the most significant of the child index
        let s = octree_encode(&c(&[[1, 0, 0]]), 1, false).unwrap();
        assert_eq!(s.payload, vec![0x80 >> 4]);
        let s = octree_encode(&c(&[[0, 0, 1]]), 1, false).unwrap();
        assert_eq!(s.payload, vec![0x80 >> 1]);
    }

    #[test]
    fn errors() {
        assert!(octree_encode(&[], 4, false).is_err());
        assert!(matches!(
            octree_encode(&c(&[[16, 0, 0]]), 4, false),
            Err(Error::OutOfCube { .. })
        ));
        let mut s = octree_encode(&c(&[[1, 2, 3], [7, 7, 7]]), 3, false).unwrap();
        s.payload.pop();
        assert!(octree_decode(&s).is_err());
        let mut s = octree_encode(&c(&[[1, 2, 3], [7, 7, 7]]), 3, false).unwrap();
        s.point_count = 3;
        assert!(octree_decode(&s).is_err());
        assert!(OctreeStream::from_bytes(&[3, 0, 1]).is_err());
    }

    #[test]
    fn container_bytes_round_trip() {
        let s = octree_encode(&c(&[[1, 2, 3], [7, 7, 7], [0, 5, 1]]), 3, true).unwrap();
        let b = s.to_bytes();
        assert_eq!(b[0], 3);
        assert_eq!(b[1], 1);
        assert_eq!(&b[2..6], &3u32.to_le_bytes());
        let back = OctreeStream::from_bytes(&b).unwrap();
        assert_eq!(back, s);
        assert_eq!(octree_decode(&back).unwrap(), c(&[[0, 5, 1], [1, 2, 3], [7, 7, 7]]));
    }
}
