fn main() {
    std::process::exit(rlpf::cli::main_with_args(std::env::args_os()));
}
