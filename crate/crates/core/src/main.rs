fn main() {
    // CLI wired up once the subsystems land.
}
