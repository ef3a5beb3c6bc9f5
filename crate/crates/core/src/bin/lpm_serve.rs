use std::net::TcpListener;
use std::process::ExitCode;

use clap::Parser;
use lpm_core::runtime::{spawn_listener, Framing};

/// Serves live sessions: NDJSON over TCP and the same messages over WebSocket.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    #[arg(long, default_value = "127.0.0.1:7071")]
    ws: Option<String>,
}

fn run(args: Args) -> lpm_core::Result<()> {
    let (addr, tcp) = spawn_listener(TcpListener::bind(&args.listen)?, Framing::Ndjson, None)?;
    eprintln!("lpm-serve: ndjson on {addr}");
    let ws = match &args.ws {
        Some(a) => {
            let (addr, h) = spawn_listener(TcpListener::bind(a)?, Framing::WebSocket, None)?;
            eprintln!("lpm-serve: websocket on ws://{addr}");
            Some(h)
        }
        None => None,
    };
    let _ = tcp.join();
    if let Some(h) = ws {
        let _ = h.join();
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lpm-serve: {e}");
            ExitCode::FAILURE
        }
    }
}
