fn main() {
    std::process::exit(sgsasr::run_cli());
}
