//! The per-frame bitstream container. All integers little-endian.
//!
//! ```text
//! "DDPC" | u32 version | u8 frame type (0 = I, 1 = P) | u8 precision bits
//! | u8 lambda | u8 flags | u32 N0 | u32 N1 | u8 substream count
//! | count x (u8 id, u32 length) | payloads in table order
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DDPC";
pub const VERSION: u32 = 1;

/// Flag bit: the reference latent for the next frame is the decoded latent
/// itself rather than a re-extraction of the decoded frame.
pub const FLAG_LATENT_CARRY: u8 = 1;

pub const LAMBDAS: [u8; 5] = [3, 4, 5, 7, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameType {
    Intra,
    Inter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamId {
    /// Octree of the scale-2 coordinates.
    Coords = 1,
    Motion = 2,
    Residual = 3,
    /// Octree of the scale-3 coordinates, only with literal transmission.
    CoarseCoords = 4,
}

impl StreamId {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Coords),
            2 => Some(Self::Motion),
            3 => Some(Self::Residual),
            4 => Some(Self::CoarseCoords),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Coords => "coords",
            Self::Motion => "motion",
            Self::Residual => "residual",
            Self::CoarseCoords => "coarse_coords",
        }
    }
}

/// Rate-point tag; one of 3, 4, 5, 7, 10.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Lambda(u8);

impl Lambda {
    pub fn new(v: u8) -> Result<Self> {
        if LAMBDAS.contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::contract(format!("lambda {v} is not one of 3, 4, 5, 7, 10")))
        }
    }

    pub fn tag(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64
    }
}

impl Default for Lambda {
    fn default() -> Self {
        Self(3)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameBitstream {
    pub frame_type: FrameType,
    pub precision_bits: u32,
    pub lambda: Lambda,
    pub flags: u8,
    pub n0: u32,
    pub n1: u32,
    pub substreams: Vec<(StreamId, Vec<u8>)>,
}

impl FrameBitstream {
    pub fn substream(&self, id: StreamId) -> Option<&[u8]> {
        self.substreams.iter().find(|s| s.0 == id).map(|s| s.1.as_slice())
    }

    pub fn payload_bytes(&self) -> usize {
        self.substreams.iter().map(|s| s.1.len()).sum()
    }

    pub fn latent_carry(&self) -> bool {
        self.flags & FLAG_LATENT_CARRY != 0
    }

    fn validate(&self) -> Result<()> {
        let mut ids: Vec<StreamId> = self.substreams.iter().map(|s| s.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Corrupt("repeated substream id".into()));
        }
        for need in [StreamId::Coords, StreamId::Residual] {
            if !ids.contains(&need) {
                return Err(Error::Corrupt(format!("missing {} substream", need.name())));
            }
        }
        let has_motion = ids.contains(&StreamId::Motion);
        match (self.frame_type, has_motion) {
            (FrameType::Inter, false) => Err(Error::Corrupt("P frame without a motion substream".into())),
            (FrameType::Intra, true) => Err(Error::Corrupt("I frame with a motion substream".into())),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(32 + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.frame_type {
            FrameType::Intra => 0,
            FrameType::Inter => 1,
        });
        out.push(self.precision_bits as u8);
        out.push(self.lambda.tag());
        out.push(self.flags);
        out.extend_from_slice(&self.n0.to_le_bytes());
        out.extend_from_slice(&self.n1.to_le_bytes());
        out.push(self.substreams.len() as u8);
        for (id, data) in &self.substreams {
            out.push(*id as u8);
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        }
        for (_, data) in &self.substreams {
            out.extend_from_slice(data);
        }
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Cursor { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a DDPC frame (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported container version {version}")));
        }
        let frame_type = match r.u8()? {
            0 => FrameType::Intra,
            1 => FrameType::Inter,
            t => return Err(Error::Corrupt(format!("unknown frame type {t}"))),
        };
        let precision_bits = r.u8()? as u32;
        let lambda = Lambda::new(r.u8()?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let flags = r.u8()?;
        if flags & !FLAG_LATENT_CARRY != 0 {
            return Err(Error::Corrupt(format!("unknown flags {flags:#x}")));
        }
        let n0 = r.u32()?;
        let n1 = r.u32()?;
        let count = r.u8()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = r.u8()?;
            let id = StreamId::from_u8(raw).ok_or_else(|| Error::Corrupt(format!("unknown substream id {raw}")))?;
            table.push((id, r.u32()? as usize));
        }
        let declared: usize = table.iter().map(|t| t.1).sum();
        let rest = data.len() - r.pos;
        if declared != rest {
            return Err(if declared > rest {
                Error::Truncated(format!("substreams declare {declared} bytes, {rest} present"))
            } else {
                Error::Corrupt(format!("{} bytes after the declared substreams", rest - declared))
            });
        }
        let substreams = table
            .into_iter()
            .map(|(id, len)| Ok((id, r.take(len)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        let b = Self {
            frame_type,
            precision_bits,
            lambda,
            flags,
            n0,
            n1,
            substreams,
        };
        b.validate()?;
        Ok(b)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated(format!("container ends at byte {}", self.data.len())));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameBitstream {
        FrameBitstream {
            frame_type: FrameType::Inter,
            precision_bits: 10,
            lambda: Lambda::new(7).unwrap(),
            flags: FLAG_LATENT_CARRY,
            n0: 1234,
            n1: 400,
            substreams: vec![
                (StreamId::Coords, vec![1, 2, 3]),
                (StreamId::Motion, vec![]),
                (StreamId::Residual, vec![9; 17]),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DDPC");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 1 + 3 * 5 + 20);
        assert_eq!(FrameBitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn malformed_inputs() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(FrameBitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(FrameBitstream::from_bytes(&longer).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FrameBitstream::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[10] = 6; // lambda
        assert!(FrameBitstream::from_bytes(&bad).is_err());
        for cut in 0..21 {
            assert!(FrameBitstream::from_bytes(&bytes[..cut]).is_err());
        }
        let mut intra = sample();
        intra.frame_type = FrameType::Intra;
        assert!(intra.to_bytes().is_err());
    }

    #[test]
    fn lambda_tags() {
        for v in LAMBDAS {
            assert_eq!(Lambda::new(v).unwrap().value(), v as f64);
        }
        assert!(Lambda::new(6).is_err());
    }
}
