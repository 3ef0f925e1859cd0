fn main() {
    pfvi::cli::main();
}
