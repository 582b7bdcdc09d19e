//! Binary wire protocol of the remote storage service.
//!
//! Frame: `[u32 length][u8 opcode][payload]`, where `length` counts the
//! opcode and payload bytes. All integers are big-endian.
//!
//! | opcode | request payload                                 |
//! |--------|-------------------------------------------------|
//! | 0x01   | GET: `[u64 key]`                                |
//! | 0x02   | PUT: `[u64 key][u32 len][value]`                |
//! | 0x03   | BATCH_GET: `[u32 n]([u64 key]){n}`              |
//! | 0x04   | BATCH_PUT: `[u32 n]([u64 key][u32 len][value]){n}` |
//!
//! A response carries opcode `0x80 | request opcode`, then a status byte,
//! then a status-specific payload:
//!
//! * `OK` (0x00): GET → `[u32 len][value]`; BATCH_GET → `[u32 n]([u32 len][value]){n}`;
//!   PUT / BATCH_PUT → empty.
//! * `NOT_FOUND` (0x01): GET only, empty payload.
//! * `MISSING_KEYS` (0x02): BATCH_GET only, `[u32 n]([u64 key]){n}`.
//! * `ERROR` (0x03): `[u32 len][utf-8 message]`.

use std::io::{self, Read, Write};

use super::StorageError;

pub const OP_GET: u8 = 0x01;
pub const OP_PUT: u8 = 0x02;
pub const OP_BATCH_GET: u8 = 0x03;
pub const OP_BATCH_PUT: u8 = 0x04;
pub const RESPONSE_BIT: u8 = 0x80;

pub const STATUS_OK: u8 = 0x00;
pub const STATUS_NOT_FOUND: u8 = 0x01;
pub const STATUS_MISSING_KEYS: u8 = 0x02;
pub const STATUS_ERROR: u8 = 0x03;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Get(u64),
    Put(u64, Vec<u8>),
    BatchGet(Vec<u64>),
    BatchPut(Vec<(u64, Vec<u8>)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Value(Option<Vec<u8>>),
    Stored,
    Values(Vec<Vec<u8>>),
    MissingKeys(Vec<u64>),
    BatchStored,
    Error(u8, String),
}

impl Request {
    pub fn opcode(&self) -> u8 {
        match self {
            Request::Get(_) => OP_GET,
            Request::Put(..) => OP_PUT,
            Request::BatchGet(_) => OP_BATCH_GET,
            Request::BatchPut(_) => OP_BATCH_PUT,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            Request::Get(k) => payload.extend_from_slice(&k.to_be_bytes()),
            Request::Put(k, v) => put_entry(&mut payload, *k, v),
            Request::BatchGet(keys) => {
                payload.extend_from_slice(&(keys.len() as u32).to_be_bytes());
                for k in keys {
                    payload.extend_from_slice(&k.to_be_bytes());
                }
            }
            Request::BatchPut(pairs) => {
                payload.extend_from_slice(&(pairs.len() as u32).to_be_bytes());
                for (k, v) in pairs {
                    put_entry(&mut payload, *k, v);
                }
            }
        }
        frame(self.opcode(), &payload)
    }

    pub fn decode(opcode: u8, payload: &[u8]) -> Result<Self, StorageError> {
        let mut r = Cursor::new(payload);
        let req = match opcode {
            OP_GET => Request::Get(r.u64()?),
            OP_PUT => {
                let k = r.u64()?;
                let v = r.bytes()?;
                Request::Put(k, v)
            }
            OP_BATCH_GET => {
                let n = r.u32()?;
                let keys = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                Request::BatchGet(keys)
            }
            OP_BATCH_PUT => {
                let n = r.u32()?;
                let pairs = (0..n)
                    .map(|_| Ok((r.u64()?, r.bytes()?)))
                    .collect::<Result<_, StorageError>>()?;
                Request::BatchPut(pairs)
            }
            op => return Err(StorageError::Protocol(format!("unknown opcode {op:#04x}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self, request_opcode: u8) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            Response::Value(Some(v)) => {
                payload.push(STATUS_OK);
                put_bytes(&mut payload, v);
            }
            Response::Value(None) => payload.push(STATUS_NOT_FOUND),
            Response::Stored | Response::BatchStored => payload.push(STATUS_OK),
            Response::Values(vs) => {
                payload.push(STATUS_OK);
                payload.extend_from_slice(&(vs.len() as u32).to_be_bytes());
                for v in vs {
                    put_bytes(&mut payload, v);
                }
            }
            Response::MissingKeys(keys) => {
                payload.push(STATUS_MISSING_KEYS);
                payload.extend_from_slice(&(keys.len() as u32).to_be_bytes());
                for k in keys {
                    payload.extend_from_slice(&k.to_be_bytes());
                }
            }
            Response::Error(status, msg) => {
                payload.push(*status);
                put_bytes(&mut payload, msg.as_bytes());
            }
        }
        frame(RESPONSE_BIT | request_opcode, &payload)
    }

    pub fn decode(request_opcode: u8, opcode: u8, payload: &[u8]) -> Result<Self, StorageError> {
        if opcode != RESPONSE_BIT | request_opcode {
            return Err(StorageError::Protocol(format!(
                "response opcode {opcode:#04x} does not answer {request_opcode:#04x}"
            )));
        }
        let mut r = Cursor::new(payload);
        let status = r.u8()?;
        let resp = match (request_opcode, status) {
            (OP_GET, STATUS_OK) => Response::Value(Some(r.bytes()?)),
            (OP_GET, STATUS_NOT_FOUND) => Response::Value(None),
            (OP_PUT, STATUS_OK) => Response::Stored,
            (OP_BATCH_GET, STATUS_OK) => {
                let n = r.u32()?;
                Response::Values((0..n).map(|_| r.bytes()).collect::<Result<_, _>>()?)
            }
            (OP_BATCH_GET, STATUS_MISSING_KEYS) => {
                let n = r.u32()?;
                Response::MissingKeys((0..n).map(|_| r.u64()).collect::<Result<_, _>>()?)
            }
            (OP_BATCH_PUT, STATUS_OK) => Response::BatchStored,
            (_, STATUS_ERROR) => {
                let msg = r.bytes()?;
                Response::Error(STATUS_ERROR, String::from_utf8_lossy(&msg).into_owned())
            }
            (op, st) => {
                return Err(StorageError::Protocol(format!(
                    "status {st:#04x} invalid for opcode {op:#04x}"
                )))
            }
        };
        r.finish()?;
        Ok(resp)
    }
}

fn frame(opcode: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
    out.push(opcode);
    out.extend_from_slice(payload);
    out
}

fn put_bytes(out: &mut Vec<u8>, v: &[u8]) {
    out.extend_from_slice(&(v.len() as u32).to_be_bytes());
    out.extend_from_slice(v);
}

fn put_entry(out: &mut Vec<u8>, k: u64, v: &[u8]) {
    out.extend_from_slice(&k.to_be_bytes());
    put_bytes(out, v);
}

/// Read one frame, returning `(opcode, payload)`; `Ok(None)` on clean EOF.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>, StorageError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(StorageError::Protocol(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let opcode = body[0];
    body.remove(0);
    Ok(Some((opcode, body)))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<(), StorageError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StorageError> {
        if self.pos + n > self.buf.len() {
            return Err(StorageError::Protocol("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, StorageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, StorageError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StorageError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, StorageError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn finish(&self) -> Result<(), StorageError> {
        if self.pos != self.buf.len() {
            return Err(StorageError::Protocol("trailing bytes in payload".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn get_frame_is_bit_exact() {
        let bytes = Request::Get(0x0102030405060708).encode();
        assert_eq!(bytes, vec![0, 0, 0, 9, 0x01, 1, 2, 3, 4, 5, 6, 7, 8]);
        let resp = Response::Value(Some(vec![0xaa, 0xbb])).encode(OP_GET);
        assert_eq!(resp, vec![0, 0, 0, 8, 0x81, 0x00, 0, 0, 0, 2, 0xaa, 0xbb]);
        assert_eq!(
            Response::Value(None).encode(OP_GET),
            vec![0, 0, 0, 2, 0x81, 0x01]
        );
    }

    #[test]
    fn batch_put_frame_is_bit_exact() {
        let bytes = Request::BatchPut(vec![(1, vec![9]), (2, vec![])]).encode();
        let expected: Vec<u8> = [
            &[0, 0, 0, 30, 0x04][..],
            &[0, 0, 0, 2],
            &[0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 9],
            &[0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0],
        ]
        .concat();
        assert_eq!(bytes, expected);
        assert_eq!(
            Response::BatchStored.encode(OP_BATCH_PUT),
            vec![0, 0, 0, 2, 0x84, 0]
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(Request::decode(0x09, &[]).is_err());
        assert!(Request::decode(OP_GET, &[1, 2, 3]).is_err());
        assert!(Request::decode(OP_GET, &[0; 9]).is_err());
        assert!(Response::decode(OP_GET, 0x82, &[0]).is_err());
        let mut huge = &[0xff, 0xff, 0xff, 0xff, 1][..];
        assert!(read_frame(&mut huge).is_err());
    }

    fn request_strategy() -> impl Strategy<Value = Request> {
        let value = proptest::collection::vec(any::<u8>(), 0..64);
        prop_oneof![
            any::<u64>().prop_map(Request::Get),
            (any::<u64>(), value.clone()).prop_map(|(k, v)| Request::Put(k, v)),
            proptest::collection::vec(any::<u64>(), 0..16).prop_map(Request::BatchGet),
            proptest::collection::vec((any::<u64>(), value), 0..16).prop_map(Request::BatchPut),
        ]
    }

    proptest! {
        #[test]
        fn request_frames_roundtrip(req in request_strategy()) {
            let bytes = req.encode();
            let (op, payload) = read_frame(&mut &bytes[..]).unwrap().unwrap();
            prop_assert_eq!(Request::decode(op, &payload).unwrap(), req);
        }

        #[test]
        fn value_responses_roundtrip(vs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 0..8)) {
            let resp = Response::Values(vs);
            let bytes = resp.encode(OP_BATCH_GET);
            let (op, payload) = read_frame(&mut &bytes[..]).unwrap().unwrap();
            prop_assert_eq!(Response::decode(OP_BATCH_GET, op, &payload).unwrap(), resp);
        }
    }
}
