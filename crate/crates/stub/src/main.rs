//! `sip-stub [ADDR]`: serves the deterministic scorer until killed.

fn main() {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8089".into());
    let addr = match addr.parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("invalid address {addr:?}: {e}");
            std::process::exit(2);
        }
    };
    match sip_stub::StubServer::bind(addr, sip_stub::StubConfig::default()) {
        Ok(server) => {
            println!("{}", server.url());
            server.wait();
        }
        Err(e) => {
            eprintln!("cannot bind {addr}: {e}");
            std::process::exit(1);
        }
    }
}
