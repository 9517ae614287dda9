//! Framing for unencrypted links: a 2-byte big-endian length, then the
//! payload as is.

use super::SecureError;

pub const MAX_PLAIN: usize = u16::MAX as usize;

pub fn encode(payload: &[u8]) -> Result<Vec<u8>, SecureError> {
    let len = u16::try_from(payload.len()).map_err(|_| SecureError::Malformed)?;
    let mut out = Vec::with_capacity(2 + payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(wire: &[u8]) -> Result<&[u8], SecureError> {
    let (len, rest) = wire.split_first_chunk::<2>().ok_or(SecureError::Malformed)?;
    let len = u16::from_be_bytes(*len) as usize;
    if rest.len() != len {
        return Err(SecureError::Malformed);
    }
    Ok(rest)
}
