fn main() {
    std::process::exit(aniso::harness::main_with_args(std::env::args_os()));
}
