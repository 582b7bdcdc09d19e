//! Storage server: serves the wire protocol over TCP, one thread per connection.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::wire::{read_frame, write_frame, Request, Response, STATUS_ERROR};
use super::{KvBackend, StorageError};

pub type SharedBackend = Arc<Mutex<Box<dyn KvBackend>>>;

fn handle(backend: &SharedBackend, req: Request) -> Response {
    // The lock is held for the whole request, which makes each batch atomic
    // with respect to other connections.
    let mut store = backend.lock().unwrap();
    let result = match req {
        Request::Get(k) => store.get(k).map(Response::Value),
        Request::Put(k, v) => store.put(k, &v).map(|_| Response::Stored),
        Request::BatchGet(keys) => store.batch_get(&keys).map(Response::Values),
        Request::BatchPut(pairs) => store.batch_put(&pairs).map(|_| Response::BatchStored),
    };
    match result {
        Ok(r) => r,
        Err(StorageError::MissingKeys(keys)) => Response::MissingKeys(keys),
        Err(e) => Response::Error(STATUS_ERROR, e.to_string()),
    }
}

fn serve_connection(stream: TcpStream, backend: SharedBackend, requests: Arc<AtomicU64>) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::with_capacity(1 << 16, read_half);
    let mut writer = BufWriter::with_capacity(1 << 16, stream);
    loop {
        let (op, payload) = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => return,
        };
        let response = match Request::decode(op, &payload) {
            Ok(req) => handle(&backend, req),
            Err(e) => Response::Error(STATUS_ERROR, e.to_string()),
        };
        requests.fetch_add(1, Ordering::Relaxed);
        if write_frame(&mut writer, &response.encode(op & 0x7f)).is_err() {
            return;
        }
    }
}

/// Accept connections until the listener fails.
pub fn serve(listener: TcpListener, backend: SharedBackend) -> Result<(), StorageError> {
    let requests = Arc::new(AtomicU64::new(0));
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = backend.clone();
        let requests = requests.clone();
        std::thread::spawn(move || serve_connection(stream, backend, requests));
    }
    Ok(())
}

/// A server running on a background thread, stopped on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests answered so far, across all connections.
    pub fn requests_served(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind `addr` (port 0 picks a free port) and serve in the background.
pub fn spawn(addr: &str, backend: Box<dyn KvBackend>) -> Result<ServerHandle, StorageError> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let requests = Arc::new(AtomicU64::new(0));
    let backend: SharedBackend = Arc::new(Mutex::new(backend));
    let thread = {
        let stop = stop.clone();
        let requests = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let backend = backend.clone();
                    let requests = requests.clone();
                    std::thread::spawn(move || serve_connection(stream, backend, requests));
                }
            }
        })
    };
    Ok(ServerHandle {
        addr,
        stop,
        requests,
        thread: Some(thread),
    })
}
