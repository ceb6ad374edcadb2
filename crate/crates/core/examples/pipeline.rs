//! Runs the whole recipe through the command-line front end, e.g.
//! `cargo run --release --example pipeline -- examples/configs/lifelong.json`.
//! Config files only list what differs from the toy defaults.

fn main() {
    let mut args = vec!["layermoe".to_string(), "run-pipeline".to_string()];
    if let Some(path) = std::env::args().nth(1) {
        args.extend(["--config".to_string(), path]);
    }
    let env: Vec<(String, String)> = std::env::vars().collect();
    let code = layermoe::cli::dispatch(args, &env, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
