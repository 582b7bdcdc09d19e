use std::io::{BufReader, BufWriter};
use std::net::TcpStream;

use super::wire::{read_frame, write_frame, Request, Response};
use super::{KvBackend, StorageError};

/// Client side of the wire protocol, one TCP connection per store handle.
#[derive(Debug)]
pub struct RemoteStore {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl RemoteStore {
    pub fn connect(addr: &str) -> Result<Self, StorageError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::with_capacity(1 << 16, stream.try_clone()?),
            writer: BufWriter::with_capacity(1 << 16, stream),
        })
    }

    fn call(&mut self, req: Request) -> Result<Response, StorageError> {
        let op = req.opcode();
        write_frame(&mut self.writer, &req.encode())?;
        let (resp_op, payload) = read_frame(&mut self.reader)?
            .ok_or_else(|| StorageError::Protocol("server closed the connection".into()))?;
        match Response::decode(op, resp_op, &payload)? {
            Response::Error(_, msg) => Err(StorageError::Protocol(msg)),
            Response::MissingKeys(keys) => Err(StorageError::MissingKeys(keys)),
            r => Ok(r),
        }
    }
}

fn unexpected(r: Response) -> StorageError {
    StorageError::Protocol(format!("unexpected response {r:?}"))
}

impl KvBackend for RemoteStore {
    fn put(&mut self, key: u64, value: &[u8]) -> Result<(), StorageError> {
        match self.call(Request::Put(key, value.to_vec()))? {
            Response::Stored => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    fn get(&mut self, key: u64) -> Result<Option<Vec<u8>>, StorageError> {
        match self.call(Request::Get(key))? {
            Response::Value(v) => Ok(v),
            r => Err(unexpected(r)),
        }
    }

    fn batch_get(&mut self, keys: &[u64]) -> Result<Vec<Vec<u8>>, StorageError> {
        match self.call(Request::BatchGet(keys.to_vec()))? {
            Response::Values(vs) if vs.len() == keys.len() => Ok(vs),
            r => Err(unexpected(r)),
        }
    }

    fn batch_put(&mut self, pairs: &[(u64, Vec<u8>)]) -> Result<(), StorageError> {
        match self.call(Request::BatchPut(pairs.to_vec()))? {
            Response::BatchStored => Ok(()),
            r => Err(unexpected(r)),
        }
    }
}
