# heightmap-eds storage module