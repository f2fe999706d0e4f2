fn main() {
    let env = std::env::vars().collect();
    std::process::exit(wayfind_cli::run(std::env::args_os(), &env));
}
