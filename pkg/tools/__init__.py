# heightmap-eds tools module