# hdivflow Services Package
