use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, ValueEnum};

use epsolute::storage::server::serve;
use epsolute::storage::{DiskStore, KvBackend, MemoryStore};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Memory,
    Disk,
}

/// Untrusted key-value storage server speaking the engine's wire protocol.
#[derive(Debug, Parser)]
#[command(name = "epsolute-kvs", version)]
struct Args {
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, value_enum, default_value = "memory")]
    backend: Backend,
    /// Directory for the disk backend's log file
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let backend: Box<dyn KvBackend> = match args.backend {
        Backend::Memory => Box::new(MemoryStore::new()),
        Backend::Disk => match DiskStore::open(&args.data_dir.join("store.log")) {
            Ok(d) => Box::new(d),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
    };
    let listener = match TcpListener::bind(&args.listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot listen on {}: {e}", args.listen);
            return ExitCode::from(1);
        }
    };
    if let Ok(addr) = listener.local_addr() {
        eprintln!("listening on {addr}");
    }
    match serve(listener, Arc::new(Mutex::new(backend))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
