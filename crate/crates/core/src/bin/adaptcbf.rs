fn main() {
    std::process::exit(adaptcbf::harness::run_cli(std::env::args_os()));
}
