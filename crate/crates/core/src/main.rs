fn main() {
    std::process::exit(maskcodec::cli::main());
}
