use crate::error::{Error, Result};

/// Bit widths that evenly divide a byte.
pub const SUPPORTED_WIDTHS: [u8; 4] = [1, 2, 4, 8];

const HEADER_LEN: usize = 9;

/// Low-bitwidth integers packed into bytes, element 0 in the least
/// significant bits of byte 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    pub width: u8,
    pub count: usize,
    /// Added to every value before packing so stored codes are non-negative.
    pub offset: i32,
    pub payload: Vec<u8>,
}

impl PackedBits {
    pub fn payload_len(count: usize, width: u8) -> usize {
        (count * width as usize).div_ceil(8)
    }

    /// Wire form: `count: u32 LE | width: u8 | offset: i32 LE | payload`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.push(self.width);
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "packed header needs {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let width = bytes[4];
        let offset = i32::from_le_bytes(bytes[5..9].try_into().unwrap());
        check_width(width)?;
        let packed = PackedBits {
            width,
            count,
            offset,
            payload: bytes[HEADER_LEN..].to_vec(),
        };
        packed.check_len()?;
        Ok(packed)
    }

    fn check_len(&self) -> Result<()> {
        let want = Self::payload_len(self.count, self.width);
        if self.payload.len() != want {
            return Err(Error::Format(format!(
                "{} elements at width {} need {want} payload bytes, got {}",
                self.count,
                self.width,
                self.payload.len()
            )));
        }
        Ok(())
    }
}

fn check_width(width: u8) -> Result<()> {
    if SUPPORTED_WIDTHS.contains(&width) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "bit width {width} does not evenly divide 8"
        )))
    }
}

/// Pack `values + offset` at `width` bits per element.
pub fn pack(values: &[i32], width: u8, offset: i32) -> Result<PackedBits> {
    check_width(width)?;
    let max_code = (1i64 << width) - 1;
    let per_byte = 8 / width as usize;
    let mut payload = vec![0u8; PackedBits::payload_len(values.len(), width)];
    for (j, &v) in values.iter().enumerate() {
        let code = v as i64 + offset as i64;
        if !(0..=max_code).contains(&code) {
            return Err(Error::Range {
                index: j,
                value: v as i64,
                width,
                offset,
            });
        }
        let shift = (j % per_byte) * width as usize;
        payload[j / per_byte] |= (code as u8) << shift;
    }
    Ok(PackedBits {
        width,
        count: values.len(),
        offset,
        payload,
    })
}

pub fn unpack(packed: &PackedBits) -> Result<Vec<i32>> {
    check_width(packed.width)?;
    packed.check_len()?;
    let width = packed.width as usize;
    let per_byte = 8 / width;
    let mask = ((1u16 << width) - 1) as u8;
    Ok((0..packed.count)
        .map(|j| {
            let code = (packed.payload[j / per_byte] >> ((j % per_byte) * width)) & mask;
            code as i32 - packed.offset
        })
        .collect())
}

/// Pack `±1` values one bit each using `{-1, 1} → {0, 1}`.
pub fn pack_signs(signs: &[i8]) -> Result<PackedBits> {
    let mut payload = vec![0u8; PackedBits::payload_len(signs.len(), 1)];
    for (j, &s) in signs.iter().enumerate() {
        match s {
            1 => payload[j / 8] |= 1 << (j % 8),
            -1 => {}
            other => {
                return Err(Error::Range {
                    index: j,
                    value: other as i64,
                    width: 1,
                    offset: 0,
                })
            }
        }
    }
    Ok(PackedBits {
        width: 1,
        count: signs.len(),
        offset: 0,
        payload,
    })
}

/// Inverse of [`pack_signs`]: `{0, 1} → {-1, 1}`.
pub fn unpack_signs(packed: &PackedBits) -> Result<Vec<i8>> {
    if packed.width != 1 || packed.offset != 0 {
        return Err(Error::Format(format!(
            "sign payload must be width 1 offset 0, got width {} offset {}",
            packed.width, packed.offset
        )));
    }
    packed.check_len()?;
    Ok((0..packed.count)
        .map(|j| {
            if packed.payload[j / 8] >> (j % 8) & 1 == 1 {
                1
            } else {
                -1
            }
        })
        .collect())
}
