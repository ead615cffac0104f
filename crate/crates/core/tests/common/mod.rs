pub mod oracles;
pub mod server;
