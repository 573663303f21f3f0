//! Host zone as a standalone process: the framed protocol on stdin/stdout.

fn main() {
    std::process::exit(obft_core::zones::run_host_process());
}
